// Wire types mirroring the annotation service's REST payloads.

export type Verdict = "keep" | "discard";

export const DISCARD_REASONS = [
  "bad_text",
  "too_similar",
  "too_different",
  "low_quality",
  "captions_too_similar",
] as const;

export type DiscardReason = (typeof DISCARD_REASONS)[number];

export interface CandidateView {
  candidate_id: string;
  query_video: string;
  target_video: string;
  texts: string[]; // exactly three, displayed in server order
  query_frames: string[];
  target_frames: string[];
  query_frame_urls: string[];
  target_frame_urls: string[];
  caption_query?: string;
  caption_target?: string;
}

export interface DecisionBody {
  candidate_id: string;
  verdict: Verdict;
  annotator: string;
  chosen_index?: number;
  discard_reason?: DiscardReason;
}

export interface Stats {
  pool: number;
  decided: number;
  remaining: number;
  kept: number;
  discarded: number;
  discard_rate: number | null;
  discard_reasons: Record<string, number>;
}

export interface ExportedTriplet {
  query_video: string;
  target_video: string;
  text: string;
  caption_a: string;
  caption_b: string;
  candidate_id: string;
  chosen_index: number;
  annotator: string;
}

export interface ExportPayload {
  triplets: ExportedTriplet[];
  stats: Stats;
}

export interface NextResponse {
  candidate: CandidateView | null;
  stats: Stats;
}

export interface DecisionResponse {
  status: "ok" | "duplicate";
  stats: Stats;
}

/** The only surface the UI talks to: the annotation service REST API. */
export interface ApiClient {
  nextCandidate(annotator: string): Promise<NextResponse>;
  postDecision(body: DecisionBody): Promise<DecisionResponse>;
  stats(): Promise<Stats>;
  exportSet(): Promise<ExportPayload>;
}

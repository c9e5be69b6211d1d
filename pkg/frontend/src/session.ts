// Review-flow state machine, deliberately DOM-free so it is testable: the
// renderer subscribes to state changes, and keyboard events feed handleKey.
//
// Flow per candidate: stage a decision (1/2/3 keeps a text, d then 1-5
// discards with a reason), confirm with Enter, undo with u before the
// confirm. A failed submit retains the decision locally and offers retry;
// nothing is ever dropped silently.

import { interpretKey } from "./keymap.js";
import {
  DISCARD_REASONS,
  type ApiClient,
  type CandidateView,
  type DecisionBody,
  type DiscardReason,
  type Stats,
} from "./types.js";

export type Phase = "idle" | "loading" | "review" | "done" | "submit_error" | "load_error";

export type Staged =
  | { verdict: "keep"; chosenIndex: 0 | 1 | 2 }
  | { verdict: "discard"; reason: DiscardReason };

export interface HistoryEntry {
  body: DecisionBody;
  status: "ok" | "duplicate";
}

/** Resolves once every frame URL is displayable; rejects otherwise. */
export type FrameLoader = (urls: string[]) => Promise<void>;

const noPreload: FrameLoader = () => Promise.resolve();

export class ReviewSession {
  phase: Phase = "idle";
  candidate: CandidateView | null = null;
  staged: Staged | null = null;
  reasonMenuOpen = false;
  history: HistoryEntry[] = [];
  stats: Stats | null = null;
  pending: DecisionBody | null = null;
  lastError: string | null = null;

  private listeners: Array<() => void> = [];

  constructor(
    private readonly api: ApiClient,
    private readonly annotator: string,
    private readonly frameLoader: FrameLoader = noPreload,
  ) {}

  onChange(listener: () => void): void {
    this.listeners.push(listener);
  }

  private emit(): void {
    for (const listener of this.listeners) listener();
  }

  async start(): Promise<void> {
    await this.advance();
  }

  private async advance(): Promise<void> {
    this.phase = "loading";
    this.candidate = null;
    this.staged = null;
    this.reasonMenuOpen = false;
    this.emit();
    try {
      const next = await this.api.nextCandidate(this.annotator);
      this.stats = next.stats;
      if (next.candidate === null) {
        this.phase = "done";
        this.emit();
        return;
      }
      await this.frameLoader([
        ...next.candidate.query_frame_urls,
        ...next.candidate.target_frame_urls,
      ]);
      this.candidate = next.candidate;
      this.phase = "review";
      this.lastError = null;
    } catch (err) {
      this.phase = "load_error";
      this.lastError = String(err);
    }
    this.emit();
  }

  stageChoice(index: number): void {
    if (this.phase !== "review" || this.candidate === null) return;
    if (index < 0 || index >= this.candidate.texts.length) return; // never a fourth option
    this.staged = { verdict: "keep", chosenIndex: index as 0 | 1 | 2 };
    this.reasonMenuOpen = false;
    this.emit();
  }

  openReasonMenu(): void {
    if (this.phase !== "review") return;
    this.reasonMenuOpen = true;
    this.emit();
  }

  stageReason(index: number): void {
    if (this.phase !== "review" || !this.reasonMenuOpen) return;
    const reason = DISCARD_REASONS[index];
    if (reason === undefined) return;
    this.staged = { verdict: "discard", reason };
    this.reasonMenuOpen = false;
    this.emit();
  }

  undo(): void {
    this.staged = null;
    this.reasonMenuOpen = false;
    this.emit();
  }

  async confirm(): Promise<void> {
    if (this.phase !== "review" || this.staged === null || this.candidate === null) return;
    const body: DecisionBody = {
      candidate_id: this.candidate.candidate_id,
      verdict: this.staged.verdict,
      annotator: this.annotator,
    };
    if (this.staged.verdict === "keep") {
      body.chosen_index = this.staged.chosenIndex;
    } else {
      body.discard_reason = this.staged.reason;
    }
    await this.submit(body);
  }

  private async submit(body: DecisionBody): Promise<void> {
    try {
      const resp = await this.api.postDecision(body);
      this.history.push({ body, status: resp.status });
      this.stats = resp.stats;
      this.pending = null;
      await this.advance();
    } catch (err) {
      // retained locally; surfaced as a retry banner
      this.pending = body;
      this.phase = "submit_error";
      this.lastError = String(err);
      this.emit();
    }
  }

  async retry(): Promise<void> {
    if (this.pending !== null) {
      const body = this.pending;
      this.pending = null;
      this.phase = "review";
      await this.submit(body);
    } else if (this.phase === "load_error") {
      await this.advance();
    }
  }

  async handleKey(key: string): Promise<void> {
    const action = interpretKey(key, this.reasonMenuOpen);
    if (action === null) return;
    switch (action.kind) {
      case "choose":
        this.stageChoice(action.index);
        break;
      case "discard":
        this.openReasonMenu();
        break;
      case "reason":
        this.stageReason(action.index);
        break;
      case "undo":
        this.undo();
        break;
      case "confirm":
        await this.confirm();
        break;
      case "retry":
        await this.retry();
        break;
    }
  }
}

// DOM rendering for the review session. Pure presentation: every displayed
// text comes verbatim from the candidate payload, in server order.

import type { ReviewSession } from "./session.js";
import { DISCARD_REASONS } from "./types.js";

function el(tag: string, className: string, text?: string): HTMLElement {
  const node = document.createElement(tag);
  node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

function frameStrip(label: string, caption: string | undefined, urls: string[]): HTMLElement {
  const box = el("section", "video-panel");
  box.appendChild(el("h2", "panel-title", label));
  if (caption) box.appendChild(el("p", "caption", caption));
  const strip = el("div", "frame-strip");
  for (const url of urls) {
    const img = document.createElement("img");
    img.src = url;
    img.alt = `${label} frame`;
    strip.appendChild(img);
  }
  box.appendChild(strip);
  return box;
}

export function render(root: HTMLElement, session: ReviewSession, exportUrl: string): void {
  root.replaceChildren();

  const stats = session.stats;
  const header = el("header", "topbar");
  header.appendChild(el("span", "brand", "triplet review"));
  if (stats) {
    const rate = stats.discard_rate === null ? "–" : `${(stats.discard_rate * 100).toFixed(1)}%`;
    header.appendChild(
      el(
        "span",
        "progress",
        `${stats.decided}/${stats.pool} decided · ${stats.kept} kept · discard rate ${rate}`,
      ),
    );
  }
  root.appendChild(header);

  if (session.phase === "loading" || session.phase === "idle") {
    root.appendChild(el("p", "status", "loading next candidate…"));
    return;
  }
  if (session.phase === "done") {
    const done = el("div", "done-screen");
    done.appendChild(el("h2", "", "all candidates reviewed"));
    const link = document.createElement("a");
    link.href = exportUrl;
    link.textContent = "download the exported test set";
    done.appendChild(link);
    root.appendChild(done);
    return;
  }
  if (session.phase === "load_error") {
    const banner = el("div", "banner error", `could not load the next candidate: ${session.lastError}`);
    banner.appendChild(el("span", "hint", " — press r to retry"));
    root.appendChild(banner);
    return;
  }

  const cand = session.candidate;
  if (cand === null) return;

  if (session.phase === "submit_error") {
    const banner = el("div", "banner error", "submit failed; your decision is saved locally");
    banner.appendChild(el("span", "hint", " — press r to retry"));
    root.appendChild(banner);
  }

  const videos = el("div", "videos");
  videos.appendChild(frameStrip("query", cand.caption_query, cand.query_frame_urls));
  videos.appendChild(frameStrip("target", cand.caption_target, cand.target_frame_urls));
  root.appendChild(videos);

  const options = el("ol", "text-options");
  cand.texts.forEach((text, i) => {
    const item = el("li", "text-option", `${i + 1}. ${text}`);
    if (session.staged?.verdict === "keep" && session.staged.chosenIndex === i) {
      item.classList.add("selected");
    }
    options.appendChild(item);
  });
  root.appendChild(options);

  if (session.reasonMenuOpen) {
    const menu = el("div", "reason-menu", "discard reason:");
    DISCARD_REASONS.forEach((reason, i) => {
      menu.appendChild(el("span", "reason", `${i + 1} ${reason.replaceAll("_", " ")}`));
    });
    root.appendChild(menu);
  } else if (session.staged?.verdict === "discard") {
    root.appendChild(el("div", "staged", `staged: discard (${session.staged.reason}) — Enter to confirm, u to undo`));
  } else if (session.staged?.verdict === "keep") {
    root.appendChild(el("div", "staged", "staged: keep — Enter to confirm, u to undo"));
  } else {
    root.appendChild(el("div", "help", "1/2/3 keep a text · d discard · Enter confirm · u undo"));
  }

  if (session.history.length > 0) {
    const history = el("div", "history", "recent: ");
    for (const entry of session.history.slice(-8)) {
      const kind = entry.body.verdict === "keep" ? `kept #${(entry.body.chosen_index ?? 0) + 1}` : "discarded";
      history.appendChild(el("span", `chip ${entry.body.verdict}`, `${entry.body.candidate_id} ${kind}`));
    }
    root.appendChild(history);
  }
}

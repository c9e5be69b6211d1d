// Bootstrap: wire the API client, frame preloading, keyboard, and renderer.
//
// Query parameters: ?api=<base-url> (defaults to same origin) and
// ?annotator=<id> (defaults to a stored or prompted id).

import { HttpApi } from "./api.js";
import { render } from "./render.js";
import { ReviewSession, type FrameLoader } from "./session.js";

function annotatorId(params: URLSearchParams): string {
  const fromQuery = params.get("annotator");
  if (fromQuery) {
    localStorage.setItem("annotator", fromQuery);
    return fromQuery;
  }
  const stored = localStorage.getItem("annotator");
  if (stored) return stored;
  const entered = window.prompt("annotator id:") || "anonymous";
  localStorage.setItem("annotator", entered);
  return entered;
}

// render only when every frame URL resolves
const imagePreloader: FrameLoader = (urls) =>
  Promise.all(
    urls.map(
      (url) =>
        new Promise<void>((resolve, reject) => {
          const img = new Image();
          img.onload = () => resolve();
          img.onerror = () => reject(new Error(`frame failed to load: ${url}`));
          img.src = url;
        }),
    ),
  ).then(() => undefined);

function start(): void {
  const params = new URLSearchParams(window.location.search);
  const api = new HttpApi(params.get("api") ?? window.location.origin);
  const session = new ReviewSession(api, annotatorId(params), imagePreloader);
  const root = document.getElementById("app");
  if (root === null) throw new Error("missing #app container");

  session.onChange(() => render(root, session, api.exportUrl()));
  window.addEventListener("keydown", (event) => {
    if (event.ctrlKey || event.altKey || event.metaKey) return;
    void session.handleKey(event.key);
  });
  void session.start();
}

start();

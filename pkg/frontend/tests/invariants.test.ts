// UI invariants: no fabricated options, server-order display, frame gating.

import { describe, expect, it } from "vitest";

import { interpretKey } from "../src/keymap.js";
import { ReviewSession } from "../src/session.js";
import { FakeAnnotationServer, makePool } from "./fakeServer.js";

describe("keymap", () => {
  it("maps review keys", () => {
    expect(interpretKey("1", false)).toEqual({ kind: "choose", index: 0 });
    expect(interpretKey("3", false)).toEqual({ kind: "choose", index: 2 });
    expect(interpretKey("d", false)).toEqual({ kind: "discard" });
    expect(interpretKey("u", false)).toEqual({ kind: "undo" });
    expect(interpretKey("Enter", false)).toEqual({ kind: "confirm" });
    expect(interpretKey("r", false)).toEqual({ kind: "retry" });
  });

  it("never maps a fourth text option", () => {
    expect(interpretKey("4", false)).toBeNull();
    expect(interpretKey("0", false)).toBeNull();
  });

  it("interprets digits as reasons while the menu is open", () => {
    expect(interpretKey("5", true)).toEqual({ kind: "reason", index: 4 });
    expect(interpretKey("6", true)).toBeNull();
  });
});

describe("option handling", () => {
  it("texts are used in server order, never edited", async () => {
    const pool = makePool(1);
    const server = new FakeAnnotationServer(pool);
    const session = new ReviewSession(server, "a");
    await session.start();
    expect(session.candidate?.texts).toEqual(pool[0].texts);
    await session.handleKey("3");
    await session.handleKey("Enter");
    const exported = await server.exportSet();
    expect(exported.triplets[0].text).toBe(pool[0].texts[2]);
  });

  it("staging an out-of-range option is ignored", async () => {
    const server = new FakeAnnotationServer(makePool(1));
    const session = new ReviewSession(server, "a");
    await session.start();
    session.stageChoice(3);
    expect(session.staged).toBeNull();
    session.stageChoice(-1);
    expect(session.staged).toBeNull();
  });
});

describe("frame gating", () => {
  it("enters review only after all six frame urls resolve", async () => {
    const server = new FakeAnnotationServer(makePool(1));
    const seen: string[][] = [];
    const session = new ReviewSession(server, "a", async (urls) => {
      seen.push(urls);
    });
    await session.start();
    expect(session.phase).toBe("review");
    expect(seen).toHaveLength(1);
    expect(seen[0]).toHaveLength(6);
  });

  it("a failed frame load blocks rendering and is retryable", async () => {
    const server = new FakeAnnotationServer(makePool(1));
    let fail = true;
    const session = new ReviewSession(server, "a", async () => {
      if (fail) throw new Error("404 frame");
    });
    await session.start();
    expect(session.phase).toBe("load_error");
    expect(session.candidate).toBeNull();
    fail = false;
    await session.handleKey("r");
    expect(session.phase).toBe("review");
  });
});

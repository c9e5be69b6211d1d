// Keyboard shortcuts are the primary affordance: reviewing thousands of
// candidates is a throughput task.

export type KeyAction =
  | { kind: "choose"; index: 0 | 1 | 2 }
  | { kind: "discard" }
  | { kind: "reason"; index: number }
  | { kind: "undo" }
  | { kind: "confirm" }
  | { kind: "retry" };

/** Interpret a key press given whether the discard-reason menu is open. */
export function interpretKey(key: string, reasonMenuOpen: boolean): KeyAction | null {
  if (key === "u" || key === "Escape") return { kind: "undo" };
  if (key === "Enter") return { kind: "confirm" };
  if (key === "r") return { kind: "retry" };
  if (reasonMenuOpen) {
    if (/^[1-5]$/.test(key)) return { kind: "reason", index: Number(key) - 1 };
    return null;
  }
  if (/^[1-3]$/.test(key)) return { kind: "choose", index: (Number(key) - 1) as 0 | 1 | 2 };
  if (key === "d") return { kind: "discard" };
  return null;
}

/** Keyboard-first triage: single keys drive the same code paths as the
 * buttons, because queue volume makes the mouse the bottleneck. */

import type { TriageStore } from "./state.js";
import { REVIEW_KINDS } from "./types.js";

export function bindKeyboard(store: TriageStore,
                             target: Document = document): () => void {
  const handler = (event: KeyboardEvent) => {
    if (event.defaultPrevented) return;
    const tag = (event.target as HTMLElement | null)?.tagName;
    if (tag === "INPUT" || tag === "SELECT" || tag === "TEXTAREA") return;
    switch (event.key) {
      case "a":
        void store.acceptCurrent();
        break;
      case "b":
        void store.keepRight();
        break;
      case "x":
        void store.removeFragment();
        break;
      case "r":
        void store.rejectCurrent();
        break;
      case "s":
        void store.skip();
        break;
      case "c":
        void store.toggleCam();
        break;
      case "1":
      case "2":
      case "3":
      case "4":
        void store.setKind(REVIEW_KINDS[Number(event.key) - 1]);
        break;
      default:
        return;
    }
    event.preventDefault();
  };
  target.addEventListener("keydown", handler);
  return () => target.removeEventListener("keydown", handler);
}

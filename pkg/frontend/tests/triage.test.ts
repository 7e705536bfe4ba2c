/** Scripted browser session over a 20-item fixture queue: keyboard-only
 * triage across all four kinds, counters down to zero, server state equal
 * to the expected post-decision store, CAM overlay fetched and rendered. */

import { afterEach, beforeEach, describe, expect, it } from "vitest";

import { ApiClient } from "../src/api.js";
import { bindKeyboard } from "../src/keyboard.js";
import { TriageView } from "../src/render.js";
import { TriageStore } from "../src/state.js";
import { REVIEW_KINDS } from "../src/types.js";
import { MockServer, makeFixtureQueue } from "./mockServer.js";

async function settle(): Promise<void> {
  // flush the promise chains behind event handlers
  for (let i = 0; i < 8; i += 1) {
    await Promise.resolve();
    await new Promise((resolve) => setTimeout(resolve, 0));
  }
}

function press(key: string): void {
  document.dispatchEvent(new KeyboardEvent("keydown", { key,
                                                        bubbles: true }));
}

function counterText(kind: string): number {
  const node = document.querySelector(`[data-test="counter-${kind}"]`);
  return Number(node?.textContent ?? "-1");
}

describe("scripted triage session", () => {
  let server: MockServer;
  let store: TriageStore;
  let unbind: () => void;

  beforeEach(async () => {
    document.body.innerHTML = '<div id="app"></div>';
    if (typeof URL.createObjectURL !== "function") {
      (URL as unknown as Record<string, unknown>).createObjectURL =
        () => "blob:mock";
    }
    server = new MockServer(makeFixtureQueue(5));
    store = new TriageStore(new ApiClient("", server.fetch));
    new TriageView(store);
    unbind = bindKeyboard(store);
    await store.init();
    await settle();
  });

  afterEach(() => {
    unbind();
  });

  it("drains all 20 items via keyboard and matches the expected store",
     async () => {
    expect(server.pendingCount()).toBe(20);
    const expected: Array<{ item_id: string; decision: string }> = [];

    for (let tab = 0; tab < REVIEW_KINDS.length; tab += 1) {
      press(String(tab + 1)); // switch queue
      await settle();
      const kind = REVIEW_KINDS[tab];
      expect(document.getElementById("app")!.dataset.kind).toBe(kind);
      for (let n = 0; n < 5; n += 1) {
        const card = document.querySelector('[data-test="item"]');
        expect(card, `${kind} item ${n}`).not.toBeNull();
        const itemId = (card as HTMLElement).dataset.itemId!;
        const decision = n % 2 === 0 ? "accept" : "reject";
        expected.push({ item_id: itemId, decision });
        press(decision === "accept" ? "a" : "r");
        await settle();
      }
      // per-kind queue fully drained
      expect(document.querySelector('[data-test="drained"]')).not.toBeNull();
      expect(counterText(kind)).toBe(0);
    }

    // every counter at zero and nothing pending server-side
    for (const kind of REVIEW_KINDS) {
      expect(counterText(kind)).toBe(0);
    }
    expect(server.pendingCount()).toBe(0);

    // server state equals the expected post-decision store
    expect(server.decisions.map(({ item_id, decision }) =>
      ({ item_id, decision }))).toEqual(expected);
    for (const { item_id, decision } of expected) {
      const item = server.items.get(item_id)!;
      expect(item.status).toBe(decision === "accept"
        ? "accepted" : "rejected");
    }
    // decisions carried the kind-appropriate payloads
    for (const event of server.decisions) {
      const item = server.items.get(event.item_id)!;
      if (event.decision === "reject") {
        expect(event.payload).toBeNull();
      } else if (item.kind === "near_dup_pair") {
        expect(event.payload).toEqual({ keep: item.subject_ids[0] });
      } else if (item.kind === "fragment") {
        expect(event.payload).toEqual({ action: "keep" });
      } else if (item.kind === "pose_mismatch") {
        expect(event.payload).toEqual({ labels: ["11F"] });
      } else {
        expect(event.payload).toBeNull();
      }
    }
  });

  it("renders pair images with the Hamming distance", async () => {
    press("1");
    await settle();
    expect(document.querySelector('[data-test="pair-image-0"]')).not.toBeNull();
    expect(document.querySelector('[data-test="pair-image-1"]')).not.toBeNull();
    expect(document.querySelector('[data-test="hamming"]')!.textContent)
      .toBe("3");
  });

  it("proposal card shows class, confidence badge and fetches the CAM",
     async () => {
    press("4");
    await settle();
    expect(document.querySelector('[data-test="proposed-class"]')!
      .textContent).toContain("Jerome");
    expect(document.querySelector('[data-test="confidence"]')!.textContent)
      .toBe("92%");
    // toggle the overlay from the keyboard
    press("c");
    await settle();
    expect(server.camRequests).toHaveLength(1);
    expect(server.camRequests[0]).toContain("/api/cam/");
    expect(server.camRequests[0]).toContain("alpha=0.5");
    const cam = document.querySelector('[data-test="cam-image"]');
    expect(cam).not.toBeNull();
    expect((cam as HTMLImageElement).src).toBeTruthy();
    press("c");
    await settle();
    expect(document.querySelector('[data-test="cam-image"]')).toBeNull();
    expect(document.querySelector('[data-test="subject-image"]'))
      .not.toBeNull();
  });

  it("double keypress produces a single state change", async () => {
    press("1");
    await settle();
    press("a");
    press("a"); // store is busy; second press must not double-submit
    await settle();
    expect(server.decisions).toHaveLength(1);
  });

  it("keyboard ignored while typing in the class picker", async () => {
    press("3");
    await settle();
    const select = document.querySelector(
      '[data-test="class-picker"]') as HTMLSelectElement;
    const event = new KeyboardEvent("keydown",
                                    { key: "a", bubbles: true });
    Object.defineProperty(event, "target", { value: select });
    document.dispatchEvent(event);
    await settle();
    expect(server.decisions).toHaveLength(0);
  });
});

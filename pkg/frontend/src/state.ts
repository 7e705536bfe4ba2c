/** Triage state machine.
 *
 * Holds the active queue, the item under review and the per-kind pending
 * counters. Decisions are optimistic: the card clears immediately and the
 * server-supplied next item replaces it on success; any failure rolls the
 * item back. All mutations go through the documented decision endpoint —
 * the client holds no opinion about label validity.
 */

import { ApiClient, ApiError, encodeCursor } from "./api.js";
import type {
  Decision,
  DecisionPayload,
  ReviewItem,
  ReviewKind,
} from "./types.js";
import { REVIEW_KINDS } from "./types.js";

export interface TriageState {
  kind: ReviewKind;
  current: ReviewItem | null;
  counters: Record<ReviewKind, number>;
  busy: boolean;
  banner: string | null;
  drained: boolean;
  camVisible: boolean;
  camAlpha: number;
  camObjectUrl: string | null;
  poseLabel: string;
  offline: boolean;
}

type Listener = (state: TriageState) => void;

const EMPTY_COUNTERS: Record<ReviewKind, number> = {
  near_dup_pair: 0,
  fragment: 0,
  pose_mismatch: 0,
  label_proposal: 0,
};

export class TriageStore {
  private state: TriageState = {
    kind: "near_dup_pair",
    current: null,
    counters: { ...EMPTY_COUNTERS },
    busy: false,
    banner: null,
    drained: false,
    camVisible: false,
    camAlpha: 0.5,
    camObjectUrl: null,
    poseLabel: "11F",
    offline: false,
  };
  private listeners: Listener[] = [];

  constructor(readonly api: ApiClient) {}

  getState(): Readonly<TriageState> {
    return this.state;
  }

  subscribe(listener: Listener): () => void {
    this.listeners.push(listener);
    return () => {
      this.listeners = this.listeners.filter((l) => l !== listener);
    };
  }

  private update(patch: Partial<TriageState>): void {
    this.state = { ...this.state, ...patch };
    for (const listener of this.listeners) {
      listener(this.state);
    }
  }

  async init(): Promise<void> {
    await this.refreshCounters();
    await this.loadCurrent();
  }

  async refreshCounters(): Promise<void> {
    try {
      const stats = await this.api.stats();
      const counters = { ...EMPTY_COUNTERS };
      for (const kind of REVIEW_KINDS) {
        counters[kind] = stats.pending_by_kind[kind] ?? 0;
      }
      this.update({ counters, offline: false });
    } catch {
      this.update({ offline: true, banner: "service unreachable" });
    }
  }

  async setKind(kind: ReviewKind): Promise<void> {
    if (kind === this.state.kind && this.state.current) return;
    this.update({ kind, current: null, drained: false, camVisible: false,
                  camObjectUrl: null });
    await this.loadCurrent();
  }

  /** Fetch the first pending item of the active kind (or past a cursor,
   * for skip). */
  async loadCurrent(cursor?: string): Promise<void> {
    this.update({ busy: true });
    try {
      const page = await this.api.queue(this.state.kind, 1, cursor);
      const item = page.items[0] ?? null;
      if (!item && cursor) {
        // skipped past the end: wrap to the head of the queue
        return this.loadCurrent();
      }
      this.update({
        current: item,
        drained: item === null,
        busy: false,
        offline: false,
        camVisible: false,
        camObjectUrl: null,
        counters: { ...this.state.counters,
                    [this.state.kind]: page.total_pending },
      });
    } catch (error) {
      this.update({
        busy: false,
        offline: true,
        banner: error instanceof Error ? error.message : "request failed",
      });
    }
  }

  async skip(): Promise<void> {
    const current = this.state.current;
    if (!current || this.state.busy) return;
    await this.loadCurrent(encodeCursor(current.item_id));
  }

  async submit(decision: Decision, payload?: DecisionPayload): Promise<void> {
    const item = this.state.current;
    if (!item || this.state.busy) return;
    // optimistic advance: clear the card right away
    this.update({ busy: true, current: null, banner: null,
                  camVisible: false, camObjectUrl: null });
    try {
      const response = await this.api.postDecision(
        item.item_id, decision, payload);
      this.update({
        current: response.next_item,
        drained: response.next_item === null,
        busy: false,
        counters: {
          ...this.state.counters,
          [this.state.kind]: Math.max(
            0, this.state.counters[this.state.kind] - 1),
        },
      });
      await this.refreshCounters();
    } catch (error) {
      if (error instanceof ApiError && error.status === 409) {
        // decided elsewhere: refresh and re-show the queue state
        this.update({
          busy: false,
          banner: `item was already decided (${error.code})`,
        });
        await this.refreshCounters();
        await this.loadCurrent();
        return;
      }
      // rollback: the decision did not land
      this.update({
        busy: false,
        current: item,
        offline: true,
        banner: error instanceof Error ? error.message : "decision failed",
      });
    }
  }

  /** Decision helpers per item kind; payload shapes mirror the service. */

  async acceptCurrent(): Promise<void> {
    const item = this.state.current;
    if (!item) return;
    switch (item.kind) {
      case "near_dup_pair":
        return this.submit("accept", { keep: item.subject_ids[0] });
      case "fragment":
        return this.submit("accept", { action: "keep" });
      case "pose_mismatch":
        return this.submit("accept", { labels: [this.state.poseLabel] });
      case "label_proposal":
        return this.submit("accept");
    }
  }

  async keepRight(): Promise<void> {
    const item = this.state.current;
    if (!item || item.kind !== "near_dup_pair") return;
    return this.submit("accept", { keep: item.subject_ids[1] });
  }

  async removeFragment(): Promise<void> {
    const item = this.state.current;
    if (!item || item.kind !== "fragment") return;
    return this.submit("accept", { action: "remove" });
  }

  async rejectCurrent(): Promise<void> {
    if (!this.state.current) return;
    return this.submit("reject");
  }

  setPoseLabel(code: string): void {
    this.update({ poseLabel: code });
  }

  setCamAlpha(alpha: number): void {
    this.update({ camAlpha: alpha });
    if (this.state.camVisible) {
      void this.loadCamOverlay();
    }
  }

  async toggleCam(): Promise<void> {
    const item = this.state.current;
    if (!item || item.kind !== "label_proposal") return;
    if (this.state.camVisible) {
      this.update({ camVisible: false, camObjectUrl: null });
      return;
    }
    this.update({ camVisible: true });
    await this.loadCamOverlay();
  }

  private async loadCamOverlay(): Promise<void> {
    const item = this.state.current;
    if (!item || item.kind !== "label_proposal") return;
    const code = item.evidence.code;
    try {
      const blob = await this.api.fetchCamOverlay(
        item.subject_ids[0], code, this.state.camAlpha);
      const url = typeof URL.createObjectURL === "function"
        ? URL.createObjectURL(blob)
        : this.api.camUrl(item.subject_ids[0], code, this.state.camAlpha);
      this.update({ camObjectUrl: url });
    } catch (error) {
      this.update({
        camVisible: false,
        camObjectUrl: null,
        banner: error instanceof Error ? error.message : "CAM fetch failed",
      });
    }
  }

  async retry(): Promise<void> {
    this.update({ banner: null });
    await this.refreshCounters();
    await this.loadCurrent();
  }
}

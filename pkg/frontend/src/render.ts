/** DOM rendering: one full re-render of the dynamic regions per state
 * change. No framework; the queue card is small enough that diffing would
 * buy nothing. */

import type { TriageStore } from "./state.js";
import type { ReviewItem } from "./types.js";
import { CLASS_CODES, CLASS_NAMES, KIND_LABELS, REVIEW_KINDS } from "./types.js";

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  attrs: Record<string, string> = {},
  children: (Node | string)[] = [],
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  for (const [key, value] of Object.entries(attrs)) {
    node.setAttribute(key, value);
  }
  node.append(...children);
  return node;
}

function confidenceBadge(item: ReviewItem): HTMLElement {
  const confidence = Number(item.evidence.confidence ?? "0");
  return el("span", { class: "badge", "data-test": "confidence" },
            [`${Math.round(confidence * 100)}%`]);
}

export class TriageView {
  private root: HTMLElement;

  constructor(private readonly store: TriageStore, rootId = "app") {
    const root = document.getElementById(rootId);
    if (!root) throw new Error(`missing #${rootId} container`);
    this.root = root;
    store.subscribe(() => this.render());
    this.render();
  }

  render(): void {
    const state = this.store.getState();
    this.root.replaceChildren(
      this.renderTabs(),
      this.renderBanner(),
      this.renderCard(),
    );
    this.root.dataset.kind = state.kind;
    this.root.dataset.busy = String(state.busy);
  }

  private renderTabs(): HTMLElement {
    const state = this.store.getState();
    const nav = el("nav", { class: "tabs", "data-test": "tabs" });
    REVIEW_KINDS.forEach((kind, index) => {
      const active = kind === state.kind ? " active" : "";
      const button = el("button", {
        class: `tab${active}`,
        "data-kind": kind,
        "data-test": `tab-${kind}`,
        title: `switch with key ${index + 1}`,
      }, [
        KIND_LABELS[kind],
        el("span", { class: "counter", "data-test": `counter-${kind}` },
           [String(state.counters[kind])]),
      ]);
      button.addEventListener("click", () => void this.store.setKind(kind));
      nav.append(button);
    });
    return nav;
  }

  private renderBanner(): HTMLElement {
    const state = this.store.getState();
    if (!state.banner) return el("div", { class: "banner hidden" });
    const banner = el("div", { class: "banner", "data-test": "banner" },
                      [state.banner, " "]);
    const retry = el("button", { "data-test": "retry" }, ["retry"]);
    retry.addEventListener("click", () => void this.store.retry());
    banner.append(retry);
    return banner;
  }

  private renderCard(): HTMLElement {
    const state = this.store.getState();
    if (state.busy && !state.current) {
      return el("section", { class: "card", "data-test": "loading" },
                ["loading…"]);
    }
    if (!state.current) {
      return el("section", { class: "card drained", "data-test": "drained" },
                ["queue drained — nothing pending here"]);
    }
    const item = state.current;
    const card = el("section", {
      class: "card",
      "data-test": "item",
      "data-item-id": item.item_id,
    });
    card.append(this.renderSubjects(item));
    card.append(this.renderEvidence(item));
    card.append(this.renderControls(item));
    return card;
  }

  private renderSubjects(item: ReviewItem): HTMLElement {
    const state = this.store.getState();
    const wrap = el("div", { class: "subjects" });
    if (item.kind === "near_dup_pair") {
      item.subject_ids.forEach((rid, index) => {
        wrap.append(el("figure", {}, [
          el("img", { src: item.images[index], alt: rid,
                      "data-test": `pair-image-${index}` }),
          el("figcaption", {}, [rid]),
        ]));
      });
    } else {
      const rid = item.subject_ids[0];
      const source = (item.kind === "label_proposal" && state.camVisible
                      && state.camObjectUrl)
        ? state.camObjectUrl
        : item.images[0];
      const testId = (item.kind === "label_proposal" && state.camVisible
                      && state.camObjectUrl)
        ? "cam-image" : "subject-image";
      wrap.append(el("figure", {}, [
        el("img", { src: source, alt: rid, "data-test": testId }),
        el("figcaption", {}, [rid]),
      ]));
    }
    return wrap;
  }

  private renderEvidence(item: ReviewItem): HTMLElement {
    const list = el("dl", { class: "evidence", "data-test": "evidence" });
    if (item.kind === "near_dup_pair") {
      list.append(el("dt", {}, ["Hamming distance"]),
                  el("dd", { "data-test": "hamming" },
                     [item.evidence.hamming_distance ?? "?"]));
    } else if (item.kind === "fragment") {
      list.append(el("dt", {}, ["Matched keyword"]),
                  el("dd", {}, [`${item.evidence.matched_keyword} `
                                + `(${item.evidence.field})`]));
    } else if (item.kind === "pose_mismatch") {
      list.append(el("dt", {}, ["Detected figures"]),
                  el("dd", {}, [item.evidence.n_figures ?? "?"]));
    } else {
      const code = item.evidence.code;
      list.append(
        el("dt", {}, ["Proposed class"]),
        el("dd", { "data-test": "proposed-class" },
           [CLASS_NAMES[code] ?? code, " ", confidenceBadge(item)]),
      );
    }
    return list;
  }

  private renderControls(item: ReviewItem): HTMLElement {
    const controls = el("div", { class: "controls", "data-test": "controls" });
    const button = (label: string, test: string,
                    handler: () => Promise<void>) => {
      const node = el("button", { "data-test": test }, [label]);
      node.addEventListener("click", () => void handler());
      controls.append(node);
    };

    if (item.kind === "near_dup_pair") {
      button("keep left [a]", "accept", () => this.store.acceptCurrent());
      button("keep right [b]", "keep-right", () => this.store.keepRight());
    } else if (item.kind === "fragment") {
      button("keep fragment [a]", "accept", () => this.store.acceptCurrent());
      button("remove [x]", "remove", () => this.store.removeFragment());
    } else if (item.kind === "pose_mismatch") {
      const select = el("select", { "data-test": "class-picker" });
      for (const code of CLASS_CODES) {
        const option = el("option", { value: code }, [CLASS_NAMES[code]]);
        if (code === this.store.getState().poseLabel) {
          option.setAttribute("selected", "selected");
        }
        select.append(option);
      }
      select.addEventListener("change", () =>
        this.store.setPoseLabel(select.value));
      controls.append(select);
      button("label + accept [a]", "accept", () => this.store.acceptCurrent());
    } else {
      button("accept label [a]", "accept", () => this.store.acceptCurrent());
      const toggle = el("button", { "data-test": "cam-toggle" },
                        [this.store.getState().camVisible
                          ? "hide CAM [c]" : "show CAM [c]"]);
      toggle.addEventListener("click", () => void this.store.toggleCam());
      controls.append(toggle);
      const slider = el("input", {
        type: "range", min: "0", max: "1", step: "0.1",
        value: String(this.store.getState().camAlpha),
        "data-test": "alpha-slider",
      });
      slider.addEventListener("change", () =>
        this.store.setCamAlpha(Number(slider.value)));
      controls.append(slider);
    }
    button("reject [r]", "reject", () => this.store.rejectCurrent());
    button("skip [s]", "skip", () => this.store.skip());
    return controls;
  }
}

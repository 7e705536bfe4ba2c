/** Wire shapes of the review service HTTP+JSON API. */

export type ReviewKind =
  | "near_dup_pair"
  | "fragment"
  | "pose_mismatch"
  | "label_proposal";

export const REVIEW_KINDS: ReviewKind[] = [
  "near_dup_pair",
  "fragment",
  "pose_mismatch",
  "label_proposal",
];

export type ItemStatus = "pending" | "accepted" | "rejected";

export interface ReviewItem {
  item_id: string;
  kind: ReviewKind;
  subject_ids: string[];
  evidence: Record<string, string>;
  status: ItemStatus;
  decision_payload: Record<string, unknown> | null;
  decided_at: string | null;
  /** Server-provided image links, one per subject. */
  images: string[];
}

export interface QueuePage {
  items: ReviewItem[];
  total_pending: number;
  next_cursor: string | null;
}

export type Decision = "accept" | "reject";

export interface DecisionPayload {
  keep?: string;
  action?: "keep" | "remove";
  labels?: string[];
  [key: string]: unknown;
}

export interface DecisionResponse {
  item: ReviewItem;
  next_item: ReviewItem | null;
  total_pending: number;
}

export interface StatsResponse {
  records: Record<string, number>;
  class_counts: Record<string, number>;
  split_sizes: Record<string, number>;
  pending_by_kind: Partial<Record<ReviewKind, number>>;
  model_loaded: boolean;
}

export interface ApiErrorBody {
  code: string;
  message: string;
}

/** The ten class codes, in channel order (mirrors the service). */
export const CLASS_CODES: string[] = [
  "11H(ANTONY OF PADUA)",
  "11H(FRANCIS)",
  "11H(JEROME)",
  "11H(JOHN THE BAPTIST)",
  "11HH(MARY MAGDALENE)",
  "11H(PAUL)",
  "11H(PETER)",
  "11HH(DOMINIC)",
  "11H(SEBASTIAN)",
  "11F",
];

export const CLASS_NAMES: Record<string, string> = {
  "11H(ANTONY OF PADUA)": "Anthony of Padua",
  "11H(FRANCIS)": "Francis of Assisi",
  "11H(JEROME)": "Jerome",
  "11H(JOHN THE BAPTIST)": "John the Baptist",
  "11HH(MARY MAGDALENE)": "Mary Magdalene",
  "11H(PAUL)": "Paul",
  "11H(PETER)": "Peter",
  "11HH(DOMINIC)": "Dominic",
  "11H(SEBASTIAN)": "Sebastian",
  "11F": "Virgin Mary",
};

export const KIND_LABELS: Record<ReviewKind, string> = {
  near_dup_pair: "Near duplicates",
  fragment: "Fragments",
  pose_mismatch: "Pose mismatches",
  label_proposal: "Label proposals",
};

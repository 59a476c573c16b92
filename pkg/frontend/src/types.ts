/** Wire types for the annotation service JSON API. */

export type Norm = "l0" | "linf";

export interface ImagePayload {
  width: number;
  height: number;
  /** Quantized intensities, one byte per pixel, row-major. */
  pixels: number[];
}

export interface SessionView {
  id: string;
  base_index: number;
  label: number;
  norm: Norm;
  epsilon: number;
  revision: number;
  width: number;
  height: number;
  base_pixels: number[];
  pixels: number[];
  l0_used: number;
  linf_used: number;
  edit_log?: [number, number, number, number][];
}

export interface EditResponse {
  revision: number;
  l0_used: number;
  linf_used: number;
  pixels: number[];
  [key: string]: unknown;
}

export interface SaveResponse {
  example_id: string;
  l0: number;
  linf: number;
}

export interface NextItemResponse {
  done: boolean;
  item_id?: string;
  remaining: number;
  total?: number;
  image?: ImagePayload;
}

export interface TaskCreated {
  task_id: string;
  num_items: number;
  threshold: number;
}

export interface ItemVerdict {
  item_id: string;
  verdict: "success" | "original" | "no_consensus";
  top_label: number | string;
  top_count: number;
  votes: number;
  original_label: number;
  provenance: string;
}

export interface TaskReport {
  task_id: string;
  threshold: number;
  items: ItemVerdict[];
  aggregate: {
    count: number;
    success_rate: number;
    original_rate: number;
    no_consensus_rate: number;
  };
  by_provenance: Record<string, { count: number; success_rate: number;
    original_rate: number; no_consensus_rate: number }>;
}

export type VoteLabel = number | "unreadable";

/** Thin typed client for the annotation service. */

import type {
  EditResponse, ImagePayload, NextItemResponse, SaveResponse, SessionView,
  TaskCreated, TaskReport, VoteLabel, Norm,
} from "./types.js";

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly code: string,
    message: string,
  ) {
    super(message);
    this.name = "ApiError";
  }
}

async function request<T>(base: string, path: string, init?: RequestInit): Promise<T> {
  const resp = await fetch(base + path, {
    headers: { "Content-Type": "application/json" },
    ...init,
  });
  const body = await resp.json().catch(() => ({}));
  if (!resp.ok) {
    throw new ApiError(resp.status, body.code ?? "unknown", body.message ?? resp.statusText);
  }
  return body as T;
}

export class ApiClient {
  constructor(readonly base: string) {}

  health(): Promise<{ status: string }> {
    return request(this.base, "/health");
  }

  dataset(): Promise<{ count: number; width: number; height: number; num_categories: number }> {
    return request(this.base, "/dataset");
  }

  image(index: number): Promise<ImagePayload & { index: number; label: number }> {
    return request(this.base, `/images/${index}`);
  }

  createSession(baseIndex: number, norm: Norm, epsilon: number): Promise<SessionView> {
    return request(this.base, "/sessions", {
      method: "POST",
      body: JSON.stringify({ base_index: baseIndex, norm, epsilon }),
    });
  }

  getSession(id: string): Promise<SessionView> {
    return request(this.base, `/sessions/${id}`);
  }

  applyEdits(id: string, edits: [number, number][], revision?: number): Promise<EditResponse> {
    return request(this.base, `/sessions/${id}/edits`, {
      method: "POST",
      body: JSON.stringify(revision === undefined ? { edits } : { edits, revision }),
    });
  }

  saveExample(id: string, claimedLabel: number): Promise<SaveResponse> {
    return request(this.base, `/sessions/${id}/save`, {
      method: "POST",
      body: JSON.stringify({ claimed_label: claimedLabel }),
    });
  }

  createTask(exampleIds: string[], cleanIndices: number[], seed: number,
             threshold?: number): Promise<TaskCreated> {
    return request(this.base, "/tasks", {
      method: "POST",
      body: JSON.stringify({
        example_ids: exampleIds, clean_indices: cleanIndices, seed,
        ...(threshold === undefined ? {} : { threshold }),
      }),
    });
  }

  nextItem(taskId: string, rater: string): Promise<NextItemResponse> {
    return request(this.base, `/tasks/${taskId}/next?rater=${encodeURIComponent(rater)}`);
  }

  submitVote(taskId: string, rater: string, itemId: string,
             label: VoteLabel): Promise<{ accepted: boolean }> {
    return request(this.base, `/tasks/${taskId}/votes`, {
      method: "POST",
      body: JSON.stringify({ rater, item_id: itemId, label }),
    });
  }

  report(taskId: string): Promise<TaskReport> {
    return request(this.base, `/tasks/${taskId}/report`);
  }

  gallery(): Promise<Array<ImagePayload & { id: string; provenance: string }>> {
    return request(this.base, "/gallery");
  }
}

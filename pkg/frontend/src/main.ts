/** Wiring for the two views: pixel editor and labeling pass. */

import { ApiClient } from "./api.js";
import { attachBrush, drawImagePayload, drawPixels, flashBudget, renderMeter } from "./editor.js";
import { LabelingController } from "./labeling.js";
import { SessionController } from "./session.js";
import type { Norm, VoteLabel } from "./types.js";

const api = new ApiClient("");

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing #${id}`);
  return node as T;
}

function status(text: string): void {
  el("status").textContent = text;
}

// --- editor view ---

let session: SessionController | null = null;
let detachBrush: (() => void) | null = null;

function repaintEditor(): void {
  if (!session) return;
  drawPixels(el<HTMLCanvasElement>("editor-canvas"), session.width,
             session.height, session.current);
  renderMeter({ l0: el("meter-l0"), linf: el("meter-linf"),
                budget: el("meter-budget") }, session);
  el("rollbacks").textContent = String(session.rollbacks);
  el<HTMLButtonElement>("undo").disabled = !session.canUndo();
}

async function startSession(): Promise<void> {
  const index = Number(el<HTMLInputElement>("base-index").value);
  const norm = el<HTMLSelectElement>("norm").value as Norm;
  const epsilon = Number(el<HTMLInputElement>("epsilon").value);
  session = await SessionController.create(api, index, norm, epsilon);
  detachBrush?.();
  detachBrush = attachBrush(
    el<HTMLCanvasElement>("editor-canvas"), session,
    () => Number(el<HTMLInputElement>("intensity").value) / 255,
    (result) => {
      if (!result.ok) {
        flashBudget({ l0: el("meter-l0"), linf: el("meter-linf"),
                      budget: el("meter-budget") });
      }
      repaintEditor();
    });
  status(`editing image #${index} (${norm}, eps=${epsilon})`);
  repaintEditor();
}

async function undoStroke(): Promise<void> {
  if (!session) return;
  await session.undo();
  repaintEditor();
}

async function saveExample(): Promise<void> {
  if (!session) return;
  const claimed = Number(el<HTMLInputElement>("claimed-label").value);
  const saved = await session.save(claimed);
  status(`saved ${saved.example_id} (l0=${saved.l0}, linf=${saved.linf.toFixed(3)})`);
}

// --- labeling view ---

let labeling: LabelingController | null = null;

function repaintLabeling(): void {
  if (!labeling) return;
  const item = labeling.current;
  if (!item) {
    status(labeling.done ? "labeling pass complete, thank you" : "loading");
    el("labeling-progress").textContent = labeling.done ? "done" : "";
    return;
  }
  drawImagePayload(el<HTMLCanvasElement>("labeling-canvas"), item.image);
  el("labeling-progress").textContent =
    `${item.total - item.remaining + 1} / ${item.total}`;
}

async function startLabeling(): Promise<void> {
  const taskId = el<HTMLInputElement>("task-id").value.trim();
  const rater = el<HTMLInputElement>("rater").value.trim();
  if (!taskId || !rater) {
    status("task id and rater name are required");
    return;
  }
  labeling = new LabelingController(api, taskId, rater);
  await labeling.advance();
  repaintLabeling();
}

async function castVote(label: VoteLabel): Promise<void> {
  if (!labeling) return;
  await labeling.vote(label);
  repaintLabeling();
}

// --- bootstrapping ---

export function bootstrap(): void {
  el("start-session").addEventListener("click", () => void startSession());
  el("undo").addEventListener("click", () => void undoStroke());
  el("save").addEventListener("click", () => void saveExample());
  el("start-labeling").addEventListener("click", () => void startLabeling());
  const buttons = el("label-buttons");
  for (let digit = 0; digit <= 9; digit++) {
    const button = document.createElement("button");
    button.textContent = String(digit);
    button.addEventListener("click", () => void castVote(digit));
    buttons.appendChild(button);
  }
  const unreadable = document.createElement("button");
  unreadable.textContent = "unreadable";
  unreadable.addEventListener("click", () => void castVote("unreadable"));
  buttons.appendChild(unreadable);

  for (const tab of ["editor", "labeling"]) {
    el(`tab-${tab}`).addEventListener("click", () => {
      el("editor-view").hidden = tab !== "editor";
      el("labeling-view").hidden = tab !== "labeling";
    });
  }
  void api.health().then(
    () => status("connected"),
    () => status("service unreachable"));
}

if (typeof document !== "undefined") {
  document.addEventListener("DOMContentLoaded", bootstrap);
}

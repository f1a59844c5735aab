// Page wiring: upload a PNG, watch the decode stream paint boxes, and
// drag a rectangle to answer a prompt request.

import { ApiClient } from "./api.js";
import { dragBegin, dragEnd, dragMove, dragPreview, newDrag } from "./drag.js";
import { drawOverlays } from "./render.js";
import { applyFrame, initialState, renderText, type ViewState } from "./state.js";
import { EventStream } from "./stream.js";
import type { ViewSize } from "./coords.js";

const api = new ApiClient("");

const fileInput = document.getElementById("file") as HTMLInputElement;
const sigmaInput = document.getElementById("sigma") as HTMLInputElement;
const thresholdInput = document.getElementById("threshold") as HTMLInputElement;
const startBtn = document.getElementById("start") as HTMLButtonElement;
const statusEl = document.getElementById("status") as HTMLSpanElement;
const textPane = document.getElementById("text") as HTMLPreElement;
const canvas = document.getElementById("page") as HTMLCanvasElement;
const ctx = canvas.getContext("2d")!;

let state: ViewState = initialState();
let drag = newDrag();
let sessionId: string | null = null;
let stream: EventStream | null = null;
let pageBitmap: ImageBitmap | null = null;

function view(): ViewSize {
  return { width: canvas.width, height: canvas.height };
}

function repaint(): void {
  statusEl.textContent = state.status
    + (state.repetitionAt !== null ? ` (repetition at step ${state.repetitionAt})` : "");
  textPane.textContent = renderText(state);
  drawOverlays(ctx, state, view(), pageBitmap, dragPreview(drag, view()));
}

async function start(): Promise<void> {
  const file = fileInput.files?.[0];
  if (!file) return;
  const bytes = new Uint8Array(await file.arrayBuffer());
  let binary = "";
  bytes.forEach((b) => { binary += String.fromCharCode(b); });
  const b64 = btoa(binary);
  pageBitmap = await createImageBitmap(file);
  canvas.width = pageBitmap.width * 2;
  canvas.height = pageBitmap.height * 2;

  state = initialState();
  const created = await api.createSession(b64, {
    sigma: parseFloat(sigmaInput.value || "0.85"),
    conf_threshold: parseFloat(thresholdInput.value || "0"),
  });
  sessionId = created.id;
  const scheme = location.protocol === "https:" ? "wss" : "ws";
  stream?.stop();
  stream = new EventStream(
    `${scheme}://${location.host}/sessions/${sessionId}/events`,
    (frame) => { state = applyFrame(state, frame); repaint(); },
  );
  stream.connect();
  repaint();
}

canvas.addEventListener("pointerdown", (ev) => {
  if (state.status !== "awaiting_prompt") return;
  const r = canvas.getBoundingClientRect();
  drag = dragBegin(drag, ev.clientX - r.left, ev.clientY - r.top);
  repaint();
});

canvas.addEventListener("pointermove", (ev) => {
  const r = canvas.getBoundingClientRect();
  drag = dragMove(drag, ev.clientX - r.left, ev.clientY - r.top);
  if (drag.start) repaint();
});

canvas.addEventListener("pointerup", async () => {
  const box = dragEnd(drag, view());
  drag = newDrag();
  if (!box || !sessionId || state.status !== "awaiting_prompt") {
    repaint();
    return;
  }
  state = { ...state, dragBox: box };
  repaint();
  try {
    await api.submitPrompt(sessionId, box);
  } catch (err) {
    state = { ...state, dragBox: null };
    console.error(err);
    repaint();
  }
});

startBtn.addEventListener("click", () => { void start(); });

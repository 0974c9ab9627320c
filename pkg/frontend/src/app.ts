/**
 * Single-page client for the drag editing service.
 *
 * Annotate mode: upload a PNG, click alternating handle/target points
 * (drag existing ones to adjust), paint an editable-region mask, enter
 * prompts, submit. Watch mode: poll the job, overlay the tracked handle
 * path on the image, plot distance and loss curves, show intermediate
 * previews, offer cancel. A finished edit can be re-dragged: its output
 * becomes the next input.
 */

import { ApiError, Client, type JobStatus } from "./api.js";
import {
  type ImageDims,
  type Point,
  clientToImage,
  fitZoom,
  imageToCanvas,
} from "./coords.js";
import {
  HANDLE_COLOR,
  TARGET_COLOR,
  type Pairing,
  addPoint,
  completePairs,
  emptyPairing,
  hitTest,
  movePoint,
  nextRole,
  pairsAsQuads,
  removeLastPoint,
  roleOf,
  validateForSubmit,
} from "./pairing.js";
import {
  type MaskRaster,
  anyEditable,
  createMask,
  maskToRgba,
  paintCircle,
} from "./mask.js";
import {
  type ProgressView,
  isMonotoneNonIncreasing,
  watchToCompletion,
} from "./polling.js";

type Mode = "points" | "paint" | "erase";

interface AppState {
  imageBytes: Uint8Array | null; // original PNG bytes, sent verbatim
  image: HTMLImageElement | null;
  dims: ImageDims | null;
  zoom: number;
  pairing: Pairing;
  mask: MaskRaster | null;
  mode: Mode;
  brushRadius: number;
  dragIndex: number; // point being dragged, -1 when none
  watching: AbortController | null;
  lastView: ProgressView | null;
  resultPng: string | null; // base64 of the finished edit
}

const state: AppState = {
  imageBytes: null,
  image: null,
  dims: null,
  zoom: 1,
  pairing: emptyPairing(),
  mask: null,
  mode: "points",
  brushRadius: 2,
  dragIndex: -1,
  watching: null,
  lastView: null,
  resultPng: null,
};

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

const canvas = el<HTMLCanvasElement>("editor");
const ctx = canvas.getContext("2d")!;
const statusLine = el<HTMLElement>("status-line");
const messageBox = el<HTMLElement>("message");
const phaseBadge = el<HTMLElement>("phase");
const fusionBadge = el<HTMLElement>("fusion");
const runStats = el<HTMLElement>("run-stats");
const previewStrip = el<HTMLElement>("previews");
const distanceChart = el<HTMLCanvasElement>("distance-chart");
const lossChart = el<HTMLCanvasElement>("loss-chart");

function client(): Client {
  const base = el<HTMLInputElement>("service-url").value.trim() || "http://localhost:8000";
  return new Client(base);
}

function setMessage(text: string, isError = false): void {
  messageBox.textContent = text;
  messageBox.className = isError ? "message error" : "message";
}

// ---------------------------------------------------------------- base64

function bytesToBase64(bytes: Uint8Array): string {
  let binary = "";
  const chunk = 0x8000;
  for (let i = 0; i < bytes.length; i += chunk) {
    binary += String.fromCharCode(...bytes.subarray(i, i + chunk));
  }
  return btoa(binary);
}

function base64ToBytes(b64: string): Uint8Array {
  const binary = atob(b64);
  const out = new Uint8Array(binary.length);
  for (let i = 0; i < binary.length; i++) out[i] = binary.charCodeAt(i);
  return out;
}

// ---------------------------------------------------------------- drawing

function drawMaskOverlay(): void {
  if (!state.mask || !state.dims) return;
  const { width, height } = state.dims;
  const off = document.createElement("canvas");
  off.width = width;
  off.height = height;
  const octx = off.getContext("2d")!;
  const rgba = new Uint8ClampedArray(width * height * 4);
  for (let i = 0; i < state.mask.data.length; i++) {
    if (state.mask.data[i] > 127) {
      rgba[i * 4] = 90;
      rgba[i * 4 + 1] = 170;
      rgba[i * 4 + 2] = 255;
      rgba[i * 4 + 3] = 90;
    }
  }
  octx.putImageData(new ImageData(rgba, width, height), 0, 0);
  ctx.imageSmoothingEnabled = false;
  ctx.drawImage(off, 0, 0, canvas.width, canvas.height);
}

function drawMarker(p: Point, color: string, alpha = 1): void {
  const c = imageToCanvas(p, state.zoom);
  const r = Math.max(4, state.zoom * 0.35);
  ctx.globalAlpha = alpha;
  ctx.beginPath();
  ctx.arc(c.x, c.y, r, 0, Math.PI * 2);
  ctx.fillStyle = color;
  ctx.fill();
  ctx.lineWidth = 2;
  ctx.strokeStyle = "#ffffff";
  ctx.stroke();
  ctx.globalAlpha = 1;
}

function drawPoints(): void {
  completePairs(state.pairing).forEach(({ handle, target }) => {
    const a = imageToCanvas(handle, state.zoom);
    const b = imageToCanvas(target, state.zoom);
    ctx.beginPath();
    ctx.moveTo(a.x, a.y);
    ctx.lineTo(b.x, b.y);
    ctx.strokeStyle = "#ffffffaa";
    ctx.lineWidth = 2;
    ctx.stroke();
  });
  state.pairing.points.forEach((p, i) => {
    drawMarker(p, roleOf(i) === "handle" ? HANDLE_COLOR : TARGET_COLOR);
  });
}

function drawTrajectory(view: ProgressView): void {
  view.handlePaths.forEach((path, pairIndex) => {
    if (path.length === 0) return;
    ctx.beginPath();
    path.forEach((p, i) => {
      const c = imageToCanvas(p, state.zoom);
      if (i === 0) ctx.moveTo(c.x, c.y);
      else ctx.lineTo(c.x, c.y);
    });
    ctx.strokeStyle = "#ffd24d";
    ctx.lineWidth = 2;
    ctx.stroke();
    drawMarker(path[path.length - 1], HANDLE_COLOR);
    const target = completePairs(state.pairing)[pairIndex]?.target;
    if (target) drawMarker(target, TARGET_COLOR, 0.9);
  });
}

function redraw(): void {
  if (!state.image || !state.dims) {
    ctx.clearRect(0, 0, canvas.width, canvas.height);
    return;
  }
  canvas.width = state.dims.width * state.zoom;
  canvas.height = state.dims.height * state.zoom;
  ctx.imageSmoothingEnabled = false;
  ctx.drawImage(state.image, 0, 0, canvas.width, canvas.height);
  if (state.watching || state.lastView) {
    if (state.lastView) drawTrajectory(state.lastView);
  } else {
    drawMaskOverlay();
    drawPoints();
  }
}

interface ChartSeries {
  values: Array<number | null>;
  color: string;
  label: string;
}

function drawChart(target: HTMLCanvasElement, series: ChartSeries[]): void {
  const g = target.getContext("2d")!;
  const { width, height } = target;
  g.clearRect(0, 0, width, height);
  const finite = series.flatMap((s) =>
    s.values.filter((v): v is number => v !== null && Number.isFinite(v)),
  );
  if (finite.length === 0) return;
  const lo = Math.min(...finite, 0);
  const hi = Math.max(...finite, lo + 1e-9);
  const pad = 6;
  const sx = (i: number, n: number) =>
    n <= 1 ? pad : pad + (i * (width - 2 * pad)) / (n - 1);
  const sy = (v: number) => height - pad - ((v - lo) * (height - 2 * pad)) / (hi - lo);
  series.forEach((s) => {
    g.beginPath();
    let started = false;
    s.values.forEach((v, i) => {
      if (v === null || !Number.isFinite(v)) return;
      const x = sx(i, s.values.length);
      const y = sy(v);
      if (!started) {
        g.moveTo(x, y);
        started = true;
      } else g.lineTo(x, y);
    });
    g.strokeStyle = s.color;
    g.lineWidth = 1.5;
    g.stroke();
  });
  g.fillStyle = "#555";
  g.font = "10px sans-serif";
  series.forEach((s, i) => g.fillText(s.label, pad, 12 + i * 12));
}

// ---------------------------------------------------------------- annotate

function currentPixel(event: PointerEvent): Point | null {
  if (!state.dims) return null;
  const rect = canvas.getBoundingClientRect();
  return clientToImage(event.clientX, event.clientY, rect, state.dims);
}

function applyBrush(p: Point): void {
  if (!state.mask) return;
  paintCircle(state.mask, p.x, p.y, state.brushRadius, state.mode === "paint" ? 255 : 0);
  redraw();
}

canvas.addEventListener("pointerdown", (event) => {
  const p = currentPixel(event);
  if (!p || state.watching) return;
  if (state.mode === "points") {
    const hit = hitTest(state.pairing, p, Math.max(1, 6 / state.zoom));
    if (hit >= 0) {
      state.dragIndex = hit;
    } else {
      state.pairing = addPoint(state.pairing, p, state.dims!);
      updateAnnotateHints();
    }
  } else {
    state.dragIndex = -2; // brushing
    applyBrush(p);
  }
  canvas.setPointerCapture(event.pointerId);
  redraw();
});

canvas.addEventListener("pointermove", (event) => {
  const p = currentPixel(event);
  if (!p || state.watching) return;
  if (state.dragIndex >= 0) {
    state.pairing = movePoint(state.pairing, state.dragIndex, p, state.dims!);
    redraw();
  } else if (state.dragIndex === -2) {
    applyBrush(p);
  }
});

canvas.addEventListener("pointerup", () => {
  state.dragIndex = -1;
});

function updateAnnotateHints(): void {
  const role = nextRole(state.pairing);
  statusLine.textContent = state.dims
    ? `next click: ${role} (${role === "handle" ? "red" : "blue"})`
    : "upload a PNG to start";
}

async function loadImageBytes(bytes: Uint8Array): Promise<void> {
  const blob = new Blob([bytes as BlobPart], { type: "image/png" });
  const url = URL.createObjectURL(blob);
  const image = new Image();
  await new Promise<void>((resolve, reject) => {
    image.onload = () => resolve();
    image.onerror = () => reject(new Error("not a decodable PNG"));
    image.src = url;
  });
  state.imageBytes = bytes;
  state.image = image;
  state.dims = { width: image.naturalWidth, height: image.naturalHeight };
  state.zoom = fitZoom(state.dims, 512);
  state.pairing = emptyPairing();
  state.mask = createMask(state.dims.width, state.dims.height);
  state.lastView = null;
  state.resultPng = null;
  setMessage("");
  updateAnnotateHints();
  redraw();
}

el<HTMLInputElement>("file").addEventListener("change", async (event) => {
  const input = event.target as HTMLInputElement;
  const file = input.files?.[0];
  if (!file) return;
  if (!file.name.toLowerCase().endsWith(".png") && file.type !== "image/png") {
    setMessage("Only PNG images are supported.", true);
    return;
  }
  try {
    await loadImageBytes(new Uint8Array(await file.arrayBuffer()));
  } catch (err) {
    setMessage(String(err), true);
  }
});

for (const mode of ["points", "paint", "erase"] as Mode[]) {
  el<HTMLButtonElement>(`mode-${mode}`).addEventListener("click", () => {
    state.mode = mode;
    document
      .querySelectorAll(".mode-button")
      .forEach((b) => b.classList.toggle("active", b.id === `mode-${mode}`));
  });
}

el<HTMLInputElement>("brush-size").addEventListener("input", (event) => {
  state.brushRadius = Number((event.target as HTMLInputElement).value);
});

el<HTMLButtonElement>("undo-point").addEventListener("click", () => {
  state.pairing = removeLastPoint(state.pairing);
  updateAnnotateHints();
  redraw();
});

el<HTMLButtonElement>("clear-points").addEventListener("click", () => {
  state.pairing = emptyPairing();
  updateAnnotateHints();
  redraw();
});

el<HTMLButtonElement>("clear-mask").addEventListener("click", () => {
  if (state.dims) state.mask = createMask(state.dims.width, state.dims.height);
  redraw();
});

// ---------------------------------------------------------------- submit

async function maskPngBase64(mask: MaskRaster): Promise<string> {
  const off = document.createElement("canvas");
  off.width = mask.width;
  off.height = mask.height;
  const octx = off.getContext("2d")!;
  octx.putImageData(
    new ImageData(maskToRgba(mask), mask.width, mask.height),
    0,
    0,
  );
  const blob: Blob = await new Promise((resolve, reject) =>
    off.toBlob((b) => (b ? resolve(b) : reject(new Error("mask encode failed"))), "image/png"),
  );
  return bytesToBase64(new Uint8Array(await blob.arrayBuffer()));
}

function numberOrUndefined(id: string): number | undefined {
  const raw = el<HTMLInputElement>(id).value.trim();
  if (raw === "") return undefined;
  const value = Number(raw);
  return Number.isFinite(value) ? value : undefined;
}

function collectHyperparams(): Record<string, unknown> | undefined {
  const hp: Record<string, unknown> = {};
  const maxIterations = numberOrUndefined("hp-max-iterations");
  if (maxIterations !== undefined) hp.max_iterations = maxIterations;
  const latentLr = numberOrUndefined("hp-latent-lr");
  if (latentLr !== undefined) hp.latent_lr = latentLr;
  const adapterSteps = numberOrUndefined("hp-adapter-steps");
  if (adapterSteps !== undefined) hp.lora = { steps: adapterSteps };
  const referenceMode = el<HTMLSelectElement>("hp-reference-mode").value;
  if (referenceMode) hp.reference_mode = referenceMode;
  return Object.keys(hp).length > 0 ? hp : undefined;
}

el<HTMLButtonElement>("submit").addEventListener("click", async () => {
  if (!state.imageBytes || !state.dims) {
    setMessage("Upload an image first.", true);
    return;
  }
  const invalid = validateForSubmit(state.pairing);
  if (invalid) {
    setMessage(invalid, true);
    return;
  }
  const promptOriginal = el<HTMLInputElement>("prompt-original").value.trim();
  if (!promptOriginal) {
    setMessage("Describe the image (original prompt).", true);
    return;
  }
  try {
    const payload = {
      image_png: bytesToBase64(state.imageBytes),
      prompt_original: promptOriginal,
      prompt_edit: el<HTMLInputElement>("prompt-edit").value.trim(),
      pairs: pairsAsQuads(state.pairing),
      mask_png:
        state.mask && anyEditable(state.mask)
          ? await maskPngBase64(state.mask)
          : undefined,
      hyperparams: collectHyperparams(),
    };
    const { job_id } = await client().submitJob(payload);
    location.hash = `#job=${job_id}`;
    await watchJob(job_id);
  } catch (err) {
    setMessage(err instanceof ApiError ? `${err.code}: ${err.message}` : String(err), true);
  }
});

// ---------------------------------------------------------------- watching

function renderProgress(view: ProgressView): void {
  state.lastView = view;
  phaseBadge.textContent = view.status;
  phaseBadge.className = `badge badge-${view.status}`;
  const parts = Object.entries(view.progress).map(([k, v]) => `${k} ${v}`);
  statusLine.textContent = parts.join(" | ") || "queued";
  fusionBadge.textContent = view.fusionBranch
    ? `fusion: ${view.fusionBranch}${view.fusionCos !== null ? ` (cos ${view.fusionCos.toFixed(2)})` : ""}`
    : "";
  if (view.error) setMessage(view.error, true);

  drawChart(distanceChart, [
    { values: view.distanceCurve, color: "#222222", label: "mean target distance" },
  ]);
  drawChart(lossChart, [
    { values: view.motionCurve, color: HANDLE_COLOR, label: "motion loss" },
    { values: view.globalCurve, color: TARGET_COLOR, label: "prompt loss" },
  ]);

  const jobId = view.jobId;
  const tail = view.previewIterations.slice(-8);
  previewStrip.innerHTML = "";
  tail.forEach((iteration) => {
    const img = document.createElement("img");
    img.src = client().previewUrl(jobId, iteration);
    img.title = `iteration ${iteration}`;
    img.className = "preview";
    previewStrip.appendChild(img);
  });
  redraw();
}

async function showFinalResult(view: ProgressView): Promise<void> {
  if (view.status !== "done") return;
  const result = await client().getResult(view.jobId);
  if (result.image_png) {
    state.resultPng = result.image_png;
    await loadResultIntoCanvas(result.image_png, view);
  }
  const monotone = isMonotoneNonIncreasing(view.distanceCurve);
  runStats.textContent =
    `finished in ${result.iterations_used} iterations, ` +
    `converged=${result.converged}, distance curve monotone=${monotone}`;
}

async function loadResultIntoCanvas(b64: string, view: ProgressView): Promise<void> {
  const bytes = base64ToBytes(b64);
  const blob = new Blob([bytes as BlobPart], { type: "image/png" });
  const url = URL.createObjectURL(blob);
  const image = new Image();
  await new Promise<void>((resolve, reject) => {
    image.onload = () => resolve();
    image.onerror = () => reject(new Error("result image failed to decode"));
    image.src = url;
  });
  state.image = image; // keep dims/zoom; the edit preserves size
  redraw();
  drawTrajectory(view);
}

async function watchJob(jobId: string): Promise<void> {
  state.watching?.abort();
  const controller = new AbortController();
  state.watching = controller;
  document.body.classList.add("watching");
  try {
    const view = await watchToCompletion(client(), jobId, {
      intervalMs: 1000,
      signal: controller.signal,
      onUpdate: renderProgress,
    });
    if (view.status === "missing") {
      setMessage(`Job ${jobId} was not found.`, true);
      phaseBadge.textContent = "not found";
    } else {
      await showFinalResult(view);
    }
  } catch (err) {
    setMessage(err instanceof ApiError ? `${err.code}: ${err.message}` : String(err), true);
  } finally {
    state.watching = null;
    document.body.classList.remove("watching");
  }
}

el<HTMLButtonElement>("cancel").addEventListener("click", async () => {
  const jobId = state.lastView?.jobId;
  if (!jobId) return;
  try {
    await client().cancelJob(jobId);
  } catch (err) {
    setMessage(err instanceof ApiError ? `${err.code}: ${err.message}` : String(err), true);
  }
});

el<HTMLButtonElement>("re-drag").addEventListener("click", async () => {
  state.watching?.abort();
  location.hash = "";
  if (state.resultPng) {
    // the finished edit becomes the next input
    await loadImageBytes(base64ToBytes(state.resultPng));
  } else {
    state.lastView = null;
    redraw();
    updateAnnotateHints();
  }
});

// ---------------------------------------------------------------- startup

const hashJob = location.hash.match(/^#job=([0-9a-f]+)$/)?.[1];
updateAnnotateHints();
if (hashJob) {
  void watchJob(hashJob);
}

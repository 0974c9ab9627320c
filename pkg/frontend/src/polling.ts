/**
 * Polling view model: accumulates status and trajectory into a render-ready
 * snapshot. Pure against the JobApi interface, so tests drive it with a
 * scripted fake and the app drives it with the real client.
 */

import {
  ApiError,
  type JobApi,
  type JobStatus,
  type TrajectoryRecord,
  TERMINAL_STATUSES,
} from "./api.js";
import type { Point } from "./coords.js";

export interface ProgressView {
  jobId: string;
  status: JobStatus | "missing";
  progress: Record<string, number>;
  records: TrajectoryRecord[];
  distanceCurve: number[]; // mean handle-to-target distance per iteration
  motionCurve: number[];
  globalCurve: Array<number | null>;
  fusionBranch: string | null; // latest iteration's branch
  fusionCos: number | null;
  handlePaths: Point[][]; // per pair, tracked position per iteration
  previewIterations: number[];
  error: string | null;
  iterationsUsed: number | null;
  converged: boolean | null;
}

function emptyView(jobId: string): ProgressView {
  return {
    jobId,
    status: "queued",
    progress: {},
    records: [],
    distanceCurve: [],
    motionCurve: [],
    globalCurve: [],
    fusionBranch: null,
    fusionCos: null,
    handlePaths: [],
    previewIterations: [],
    error: null,
    iterationsUsed: null,
    converged: null,
  };
}

export function isTerminal(view: ProgressView): boolean {
  return (
    view.status === "missing" ||
    TERMINAL_STATUSES.includes(view.status as JobStatus)
  );
}

export class JobWatcher {
  readonly view: ProgressView;

  constructor(
    private readonly api: JobApi,
    jobId: string,
    private readonly pageSize = 200,
  ) {
    this.view = emptyView(jobId);
  }

  private absorb(records: TrajectoryRecord[]): void {
    const v = this.view;
    for (const record of records) {
      v.records.push(record);
      v.distanceCurve.push(record.mean_target_distance);
      v.motionCurve.push(record.loss_motion);
      v.globalCurve.push(record.loss_global);
      record.handles.forEach(([x, y], pair) => {
        if (!v.handlePaths[pair]) v.handlePaths[pair] = [];
        v.handlePaths[pair].push({ x, y });
      });
    }
    const last = records[records.length - 1];
    if (last) {
      v.fusionBranch = last.fusion_branch;
      v.fusionCos = last.fusion_cos;
    }
  }

  /** One poll round: refresh status, then page in any new records. */
  async tick(): Promise<ProgressView> {
    const v = this.view;
    let summary;
    try {
      summary = await this.api.getJob(v.jobId);
    } catch (err) {
      if (err instanceof ApiError && err.code === "not-found") {
        v.status = "missing";
        v.error = err.message;
        return v;
      }
      throw err;
    }
    v.status = summary.status;
    v.progress = summary.progress;
    v.previewIterations = summary.preview_iterations;
    v.error = summary.error;

    let page = await this.api.getTrajectory(v.jobId, v.records.length, this.pageSize);
    this.absorb(page.records);
    while (v.records.length < page.total) {
      page = await this.api.getTrajectory(v.jobId, v.records.length, this.pageSize);
      if (page.records.length === 0) break; // total shrank? never expected, avoid spinning
      this.absorb(page.records);
    }

    if (summary.status === "done") {
      const result = await this.api.getResult(v.jobId);
      v.iterationsUsed = result.iterations_used;
      v.converged = result.converged;
    }
    return v;
  }
}

function sleep(ms: number, signal?: AbortSignal): Promise<void> {
  return new Promise((resolve) => {
    const id = setTimeout(done, ms);
    function done() {
      signal?.removeEventListener("abort", done);
      clearTimeout(id);
      resolve();
    }
    signal?.addEventListener("abort", done);
  });
}

export interface WatchOptions {
  intervalMs?: number;
  onUpdate?: (view: ProgressView) => void;
  signal?: AbortSignal;
}

/**
 * Poll until the job reaches a terminal state (or the signal aborts) and
 * resolve with the final view. Every round reports through onUpdate.
 */
export async function watchToCompletion(
  api: JobApi,
  jobId: string,
  { intervalMs = 1000, onUpdate, signal }: WatchOptions = {},
): Promise<ProgressView> {
  const watcher = new JobWatcher(api, jobId);
  for (;;) {
    const view = await watcher.tick();
    onUpdate?.(view);
    if (isTerminal(view) || signal?.aborted) return view;
    await sleep(intervalMs, signal);
  }
}

/** True when the sequence never rises by more than eps. */
export function isMonotoneNonIncreasing(values: number[], eps = 1e-9): boolean {
  for (let i = 1; i < values.length; i++) {
    if (values[i] > values[i - 1] + eps) return false;
  }
  return true;
}

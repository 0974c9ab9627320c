/**
 * Typed client for the editing service. All job state flows through these
 * endpoints; the UI never touches anything else.
 */

export type JobStatus =
  | "queued"
  | "finetuning"
  | "inverting"
  | "optimizing"
  | "denoising"
  | "done"
  | "failed"
  | "cancelled";

export const TERMINAL_STATUSES: readonly JobStatus[] = [
  "done",
  "failed",
  "cancelled",
];

export interface SubmitPayload {
  image_png: string; // base64 PNG
  prompt_original: string;
  prompt_edit?: string;
  pairs: number[][]; // [handle_x, handle_y, target_x, target_y] rows
  mask_png?: string; // base64 PNG, white = editable
  hyperparams?: Record<string, unknown>;
}

export interface TrajectoryRecord {
  iteration: number;
  handles: number[][];
  loss_motion: number;
  loss_global: number | null;
  fusion_cos: number | null;
  fusion_branch: string | null;
  mean_target_distance: number;
  has_preview: boolean;
}

export interface TrajectoryPage {
  total: number;
  offset: number;
  records: TrajectoryRecord[];
}

export interface PairJson {
  handle: number[];
  target: number[];
  active?: boolean;
}

export interface JobSummary {
  job_id: string;
  status: JobStatus;
  progress: Record<string, number>;
  created_at: number;
  started_at: number | null;
  finished_at: number | null;
  error: string | null;
  pairs: PairJson[];
  preview_iterations: number[];
  iterations_used?: number;
  converged?: boolean;
}

export interface JobResult {
  job_id: string;
  status: JobStatus;
  error: string | null;
  iterations_used: number;
  converged: boolean;
  final_pairs: PairJson[];
  image_png?: string; // base64; absent for cancelled/failed jobs
  fingerprint?: string;
}

export class ApiError extends Error {
  constructor(
    public readonly status: number,
    public readonly code: string,
    message: string,
  ) {
    super(message);
    this.name = "ApiError";
  }
}

/** What the polling layer needs; the full client satisfies it. */
export interface JobApi {
  getJob(jobId: string): Promise<JobSummary>;
  getTrajectory(jobId: string, offset: number, limit: number): Promise<TrajectoryPage>;
  getResult(jobId: string): Promise<JobResult>;
}

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

async function raiseForStatus(response: Response): Promise<void> {
  if (response.ok) return;
  let code = `http-${response.status}`;
  let message = response.statusText || `request failed (${response.status})`;
  try {
    const body = await response.json();
    if (body && body.error) {
      code = body.error.code ?? code;
      message = body.error.message ?? message;
    }
  } catch {
    // non-JSON error body; keep the generic message
  }
  throw new ApiError(response.status, code, message);
}

export class Client implements JobApi {
  private readonly base: string;
  private readonly fetchFn: FetchLike;

  constructor(baseUrl: string, fetchFn?: FetchLike) {
    this.base = baseUrl.replace(/\/+$/, "");
    // wrap instead of storing the global directly: browsers reject fetch
    // invoked with a foreign `this`
    this.fetchFn = fetchFn ?? ((input, init) => fetch(input, init));
  }

  private async getJson<T>(path: string): Promise<T> {
    const response = await this.fetchFn(this.base + path);
    await raiseForStatus(response);
    return (await response.json()) as T;
  }

  private async getBytes(path: string): Promise<Uint8Array> {
    const response = await this.fetchFn(this.base + path);
    await raiseForStatus(response);
    return new Uint8Array(await response.arrayBuffer());
  }

  async submitJob(payload: SubmitPayload): Promise<{ job_id: string; status: JobStatus }> {
    const response = await this.fetchFn(this.base + "/jobs", {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(payload),
    });
    await raiseForStatus(response);
    return await response.json();
  }

  listJobs(): Promise<{ jobs: JobSummary[] }> {
    return this.getJson("/jobs");
  }

  getJob(jobId: string): Promise<JobSummary> {
    return this.getJson(`/jobs/${jobId}`);
  }

  getTrajectory(jobId: string, offset: number, limit: number): Promise<TrajectoryPage> {
    return this.getJson(`/jobs/${jobId}/trajectory?offset=${offset}&limit=${limit}`);
  }

  getResult(jobId: string): Promise<JobResult> {
    return this.getJson(`/jobs/${jobId}/result`);
  }

  async cancelJob(jobId: string): Promise<{ job_id: string; status: JobStatus }> {
    const response = await this.fetchFn(`${this.base}/jobs/${jobId}/cancel`, {
      method: "POST",
    });
    await raiseForStatus(response);
    return await response.json();
  }

  getMaskPng(jobId: string): Promise<Uint8Array> {
    return this.getBytes(`/jobs/${jobId}/mask`);
  }

  getResultImagePng(jobId: string): Promise<Uint8Array> {
    return this.getBytes(`/jobs/${jobId}/result/image`);
  }

  getPreviewPng(jobId: string, iteration: number): Promise<Uint8Array> {
    return this.getBytes(`/jobs/${jobId}/preview/${iteration}`);
  }

  previewUrl(jobId: string, iteration: number): string {
    return `${this.base}/jobs/${jobId}/preview/${iteration}`;
  }

  resultImageUrl(jobId: string): string {
    return `${this.base}/jobs/${jobId}/result/image`;
  }
}

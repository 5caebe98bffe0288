/** Wire types mirroring the service API. */

export interface GuidanceSpecWire {
  prompt: string | null;
  subject_token: number | "auto" | null;
  tau: number | null;
  scale: number;
  seed: number;
  num_outputs: number;
  num_steps: number;
  attn_mask: boolean;
}

export const DEFAULT_SPEC: GuidanceSpecWire = {
  prompt: null,
  subject_token: null,
  tau: null,
  scale: 8,
  seed: 0,
  num_outputs: 1,
  num_steps: 50,
  attn_mask: true,
};

export type FinetuneStatus = "idle" | "running" | "done" | "failed";

export interface SessionMeta {
  id: string;
  height: number;
  width: number;
  subject_token: number | null;
  finetune_status: FinetuneStatus;
  finetune_error: string | null;
  checkpoint: string | null;
  jobs: string[];
}

export type JobStatus = "queued" | "running" | "done" | "failed";

export interface MetricReportWire {
  metric: string;
  count: number;
  mean: number;
  stddev: number;
  values: number[];
}

export interface JobMeta {
  id: string;
  session_id: string;
  status: JobStatus;
  error: string | null;
  spec: GuidanceSpecWire;
  stroke: string | null;
  artifacts: string[];
  metrics: Record<string, MetricReportWire> | null;
}

export interface FinetuneProgress {
  iteration: number;
  bg_loss: number;
  ref_loss: number;
  wall_time: number;
}

export interface StepEvent {
  output: number;
  step: number;
  t: number;
  conditional: boolean;
  stroke_blended: boolean;
}

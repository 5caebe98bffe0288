/** Typed client for the inpainting service. No client-side math: the UI is a
 * spec editor and viewer; every diffusion computation happens server-side. */

import { readNdjson } from "./ndjson.js";
import type {
  FinetuneProgress,
  GuidanceSpecWire,
  JobMeta,
  SessionMeta,
  StepEvent,
} from "./types.js";

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly detail: string,
    readonly field?: string,
  ) {
    super(field ? `${field}: ${detail}` : detail);
  }
}

export interface SessionUploads {
  image: Blob;
  mask: Blob;
  exemplar?: Blob;
}

export interface FinetuneOverrides {
  total_iters?: number;
  learning_rate?: number;
  seed?: number;
  use_exemplar?: boolean;
}

export class ServiceClient {
  constructor(
    readonly baseUrl: string,
    private readonly fetchImpl: typeof fetch = fetch,
  ) {}

  private async request(path: string, init?: RequestInit): Promise<Response> {
    const response = await this.fetchImpl(`${this.baseUrl}${path}`, init);
    if (!response.ok) {
      let detail = response.statusText;
      let field: string | undefined;
      try {
        const body = (await response.json()) as { detail?: string; field?: string };
        detail = body.detail ?? detail;
        field = body.field;
      } catch {
        // non-JSON error body; keep the status text
      }
      throw new ApiError(response.status, detail, field);
    }
    return response;
  }

  async createSession(uploads: SessionUploads): Promise<SessionMeta> {
    const form = new FormData();
    form.append("image", uploads.image, "image.png");
    form.append("mask", uploads.mask, "mask.png");
    if (uploads.exemplar) form.append("exemplar", uploads.exemplar, "exemplar.png");
    const r = await this.request("/sessions", { method: "POST", body: form });
    return (await r.json()) as SessionMeta;
  }

  async getSession(id: string): Promise<SessionMeta> {
    return (await (await this.request(`/sessions/${id}`)).json()) as SessionMeta;
  }

  async startFinetune(id: string, overrides: FinetuneOverrides = {}): Promise<void> {
    await this.request(`/sessions/${id}/finetune`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(overrides),
    });
  }

  async finetuneProgress(id: string): Promise<FinetuneProgress[]> {
    const r = await this.request(`/sessions/${id}/progress`);
    const text = await r.text();
    return text
      .split("\n")
      .filter((line) => line.trim().length > 0)
      .map((line) => JSON.parse(line) as FinetuneProgress);
  }

  async submitJob(
    sessionId: string,
    spec: GuidanceSpecWire,
    stroke?: Blob,
  ): Promise<JobMeta> {
    const form = new FormData();
    form.append("spec", JSON.stringify(spec));
    if (stroke) form.append("stroke", stroke, "stroke.png");
    const r = await this.request(`/sessions/${sessionId}/jobs`, {
      method: "POST",
      body: form,
    });
    return (await r.json()) as JobMeta;
  }

  async getJob(jobId: string): Promise<JobMeta> {
    return (await (await this.request(`/jobs/${jobId}`)).json()) as JobMeta;
  }

  artifactUrl(jobId: string, index: number): string {
    return `${this.baseUrl}/jobs/${jobId}/artifacts/${index}`;
  }

  async fetchArtifact(jobId: string, index: number): Promise<Blob> {
    return await (await this.request(`/jobs/${jobId}/artifacts/${index}`)).blob();
  }

  /** Stored session input (image | mask | exemplar), echoed back as PNG. */
  async fetchSessionInput(
    sessionId: string,
    name: "image" | "mask" | "exemplar",
  ): Promise<Blob> {
    return await (await this.request(`/sessions/${sessionId}/inputs/${name}`)).blob();
  }

  async fetchJobStroke(jobId: string): Promise<Blob> {
    return await (await this.request(`/jobs/${jobId}/stroke`)).blob();
  }

  async *jobEvents(jobId: string, follow = true): AsyncGenerator<StepEvent> {
    const r = await this.request(`/jobs/${jobId}/events?follow=${follow}`);
    if (!r.body) return;
    for await (const rec of readNdjson(r.body)) {
      const event = rec as Partial<StepEvent> & { final_status?: string };
      if (event.final_status !== undefined) return;
      yield event as StepEvent;
    }
  }

  /** Poll a job until it settles. */
  async waitForJob(jobId: string, intervalMs = 250, timeoutMs = 120_000): Promise<JobMeta> {
    const deadline = Date.now() + timeoutMs;
    for (;;) {
      const job = await this.getJob(jobId);
      if (job.status === "done" || job.status === "failed") return job;
      if (Date.now() > deadline) throw new ApiError(408, `job ${jobId} timed out`);
      await new Promise((resolve) => setTimeout(resolve, intervalMs));
    }
  }
}

/** Result gallery: every entry stores the full (spec, stroke ref) it was
 * produced with, so any image is exactly reproducible by resubmission. */

import type { GuidanceSpecWire, JobMeta } from "./types.js";

export interface GalleryEntry {
  jobId: string;
  sessionId: string;
  spec: GuidanceSpecWire;
  strokeRef: string | null;
  artifactCount: number;
  rmseMean: number | null;
}

export class Gallery {
  private items: GalleryEntry[] = [];

  add(job: JobMeta): GalleryEntry {
    const entry: GalleryEntry = {
      jobId: job.id,
      sessionId: job.session_id,
      spec: structuredClone(job.spec),
      strokeRef: job.stroke,
      artifactCount: job.artifacts.length,
      rmseMean: job.metrics?.stroke_rmse?.mean ?? null,
    };
    this.items = [entry, ...this.items.filter((e) => e.jobId !== job.id)];
    return entry;
  }

  entries(): readonly GalleryEntry[] {
    return this.items;
  }

  find(jobId: string): GalleryEntry | undefined {
    return this.items.find((e) => e.jobId === jobId);
  }

  /** The stored spec, cloned: submitting it unchanged reproduces the job. */
  resubmitSpec(jobId: string): GuidanceSpecWire {
    const entry = this.find(jobId);
    if (!entry) throw new Error(`no gallery entry for job ${jobId}`);
    return structuredClone(entry.spec);
  }

  /** What-if edit: same spec with exactly one field changed. */
  variant<K extends keyof GuidanceSpecWire>(
    jobId: string,
    field: K,
    value: GuidanceSpecWire[K],
  ): GuidanceSpecWire {
    const spec = this.resubmitSpec(jobId);
    spec[field] = value;
    return spec;
  }
}

/** Field-level difference between two specs (for the what-if panel). */
export function specDelta(
  a: GuidanceSpecWire,
  b: GuidanceSpecWire,
): (keyof GuidanceSpecWire)[] {
  const keys = Object.keys(a) as (keyof GuidanceSpecWire)[];
  return keys.filter((k) => JSON.stringify(a[k]) !== JSON.stringify(b[k]));
}

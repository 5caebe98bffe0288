import { describe, expect, it } from "vitest";

import { Gallery, specDelta } from "../src/gallery.js";
import type { GuidanceSpecWire, JobMeta } from "../src/types.js";
import { DEFAULT_SPEC } from "../src/types.js";

function job(id: string, spec: Partial<GuidanceSpecWire> = {}): JobMeta {
  return {
    id,
    session_id: "s-0",
    status: "done",
    error: null,
    spec: { ...DEFAULT_SPEC, ...spec },
    stroke: null,
    artifacts: ["a0"],
    metrics: {
      stroke_rmse: { metric: "stroke_rmse", count: 1, mean: 0.12, stddev: 0, values: [0.12] },
    },
  };
}

describe("Gallery", () => {
  it("stores spec and rmse badge with each entry", () => {
    const g = new Gallery();
    const entry = g.add(job("j-1", { prompt: "a cat", seed: 4 }));
    expect(entry.spec.prompt).toBe("a cat");
    expect(entry.rmseMean).toBeCloseTo(0.12);
    expect(g.entries()).toHaveLength(1);
  });

  it("resubmit spec is identical to the stored one", () => {
    const g = new Gallery();
    g.add(job("j-1", { prompt: "x", tau: 0.4, seed: 9 }));
    const again = g.resubmitSpec("j-1");
    expect(JSON.stringify(again)).toBe(
      JSON.stringify({ ...DEFAULT_SPEC, prompt: "x", tau: 0.4, seed: 9 }),
    );
  });

  it("resubmit spec is a copy, not a live reference", () => {
    const g = new Gallery();
    g.add(job("j-1"));
    const a = g.resubmitSpec("j-1");
    a.seed = 999;
    expect(g.resubmitSpec("j-1").seed).toBe(DEFAULT_SPEC.seed);
  });

  it("seed variant changes exactly one field", () => {
    const g = new Gallery();
    g.add(job("j-1", { prompt: "boat", seed: 3 }));
    const variant = g.variant("j-1", "seed", 4);
    expect(specDelta(g.resubmitSpec("j-1"), variant)).toEqual(["seed"]);
    expect(variant.seed).toBe(4);
  });

  it("tau slider edit surfaces as a tau-only delta", () => {
    const g = new Gallery();
    g.add(job("j-1", { tau: 0.5 }));
    const variant = g.variant("j-1", "tau", 0.7);
    expect(specDelta(g.resubmitSpec("j-1"), variant)).toEqual(["tau"]);
  });

  it("newest entries come first and duplicates collapse", () => {
    const g = new Gallery();
    g.add(job("j-1"));
    g.add(job("j-2"));
    g.add(job("j-1"));
    expect(g.entries().map((e) => e.jobId)).toEqual(["j-1", "j-2"]);
  });

  it("unknown job id raises", () => {
    expect(() => new Gallery().resubmitSpec("j-none")).toThrow();
  });
});

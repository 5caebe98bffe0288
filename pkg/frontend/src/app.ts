/** DOM wiring: editor canvases, guidance panel, finetune loss curve, gallery. */

import { ServiceClient } from "./api.js";
import { CanvasDocument, EmptyMaskError } from "./document.js";
import { Gallery } from "./gallery.js";
import { DEFAULT_SPEC, type GuidanceSpecWire, type SessionMeta } from "./types.js";

type Tool = "mask" | "mask-erase" | "stroke" | "stroke-erase";

export class App {
  doc: CanvasDocument | null = null;
  session: SessionMeta | null = null;
  tool: Tool = "mask";
  gallery = new Gallery();
  spec: GuidanceSpecWire = structuredClone(DEFAULT_SPEC);

  private painting = false;
  private progressTimer: number | null = null;

  constructor(
    readonly client: ServiceClient,
    readonly root: Document,
  ) {}

  // -- canvas helpers -----------------------------------------------------

  private canvas(id: string): HTMLCanvasElement {
    return this.root.getElementById(id) as HTMLCanvasElement;
  }

  private input(id: string): HTMLInputElement {
    return this.root.getElementById(id) as HTMLInputElement;
  }

  private el(id: string): HTMLElement {
    return this.root.getElementById(id) as HTMLElement;
  }

  async loadImageFile(file: File): Promise<void> {
    const bitmap = await createImageBitmap(file);
    const scratch = new OffscreenCanvas(bitmap.width, bitmap.height);
    const ctx = scratch.getContext("2d")!;
    ctx.drawImage(bitmap, 0, 0);
    const data = ctx.getImageData(0, 0, bitmap.width, bitmap.height);
    this.doc = new CanvasDocument(
      bitmap.width,
      bitmap.height,
      new Uint8ClampedArray(data.data),
    );
    for (const id of ["layer-base", "layer-overlay"]) {
      const c = this.canvas(id);
      c.width = bitmap.width;
      c.height = bitmap.height;
    }
    this.canvas("layer-base").getContext("2d")!.putImageData(data, 0, 0);
    this.render();
  }

  /** Composite mask shading and stroke pixels over the base image. */
  render(): void {
    if (!this.doc) return;
    const { width, height, mask, stroke } = this.doc;
    const overlay = this.canvas("layer-overlay").getContext("2d")!;
    const img = overlay.createImageData(width, height);
    for (let i = 0; i < mask.length; i++) {
      const o = i * 4;
      if (stroke[o + 3] > 0) {
        img.data[o] = stroke[o];
        img.data[o + 1] = stroke[o + 1];
        img.data[o + 2] = stroke[o + 2];
        img.data[o + 3] = 255;
      } else if (mask[i] === 0) {
        img.data[o] = 40;
        img.data[o + 1] = 40;
        img.data[o + 2] = 60;
        img.data[o + 3] = 150;
      }
    }
    overlay.putImageData(img, 0, 0);
  }

  private applyBrush(x: number, y: number): void {
    if (!this.doc) return;
    const at = { x, y };
    if (this.tool === "mask") this.doc.paintMask(at);
    else if (this.tool === "mask-erase") this.doc.eraseMask(at);
    else if (this.tool === "stroke") this.doc.paintStroke(at);
    else this.doc.eraseStroke(at);
    this.render();
  }

  // -- exports -------------------------------------------------------------

  private async rasterToBlob(
    bytes: Uint8ClampedArray,
    channels: 1 | 4,
  ): Promise<Blob> {
    const { width, height } = this.doc!;
    const rgba = new Uint8ClampedArray(width * height * 4);
    if (channels === 4) {
      rgba.set(bytes);
    } else {
      for (let i = 0; i < bytes.length; i++) {
        const o = i * 4;
        rgba[o] = rgba[o + 1] = rgba[o + 2] = bytes[i];
        rgba[o + 3] = 255;
      }
    }
    const scratch = new OffscreenCanvas(width, height);
    const ctx = scratch.getContext("2d")!;
    ctx.putImageData(new ImageData(rgba, width, height), 0, 0);
    return await scratch.convertToBlob({ type: "image/png" });
  }

  async exportMaskBlob(): Promise<Blob> {
    return this.rasterToBlob(this.doc!.exportMask(), 1);
  }

  async exportStrokeBlob(): Promise<Blob | undefined> {
    if (this.doc!.strokePixelCount() === 0) return undefined;
    return this.rasterToBlob(this.doc!.exportStroke(), 4);
  }

  // -- workflow -------------------------------------------------------------

  async createSession(): Promise<void> {
    if (!this.doc) return this.notify("load an image first");
    const imageFile = this.input("image-file").files?.[0];
    if (!imageFile) return this.notify("load an image first");
    let maskBlob: Blob;
    try {
      maskBlob = await this.exportMaskBlob();
    } catch (err) {
      if (err instanceof EmptyMaskError) return this.notify(err.message);
      throw err;
    }
    const exemplarFile = this.input("exemplar-file").files?.[0] ?? undefined;
    this.session = await this.client.createSession({
      image: imageFile,
      mask: maskBlob,
      exemplar: exemplarFile,
    });
    this.el("session-id").textContent = this.session.id;
    this.el("subject-token").textContent =
      this.session.subject_token === null ? "-" : String(this.session.subject_token);
    this.notify(`session ${this.session.id} created`);
  }

  async startFinetune(): Promise<void> {
    if (!this.session) return this.notify("create a session first");
    await this.client.startFinetune(this.session.id, {});
    this.watchFinetune();
  }

  private watchFinetune(): void {
    if (this.progressTimer !== null) clearInterval(this.progressTimer);
    this.progressTimer = setInterval(async () => {
      if (!this.session) return;
      const [meta, progress] = await Promise.all([
        this.client.getSession(this.session.id),
        this.client.finetuneProgress(this.session.id),
      ]);
      this.session = meta;
      this.el("finetune-status").textContent = meta.finetune_status;
      this.drawLossCurve(progress.map((p) => p.bg_loss));
      if (progress.length > 0) {
        this.el("finetune-iter").textContent = String(
          progress[progress.length - 1].iteration + 1,
        );
      }
      if (meta.finetune_status === "done" || meta.finetune_status === "failed") {
        clearInterval(this.progressTimer!);
        this.progressTimer = null;
        if (meta.finetune_error) this.notify(meta.finetune_error);
      }
    }, 500) as unknown as number;
  }

  private drawLossCurve(losses: number[]): void {
    const c = this.canvas("loss-curve");
    const ctx = c.getContext("2d")!;
    ctx.clearRect(0, 0, c.width, c.height);
    if (losses.length < 2) return;
    const max = Math.max(...losses);
    ctx.beginPath();
    losses.forEach((v, i) => {
      const x = (i / (losses.length - 1)) * c.width;
      const y = c.height - (v / max) * (c.height - 4) - 2;
      i === 0 ? ctx.moveTo(x, y) : ctx.lineTo(x, y);
    });
    ctx.strokeStyle = "#7aa2f7";
    ctx.stroke();
  }

  readSpecFromPanel(): GuidanceSpecWire {
    const prompt = this.input("spec-prompt").value.trim();
    const useToken = this.input("spec-use-token").checked;
    const hasStroke = (this.doc?.strokePixelCount() ?? 0) > 0;
    return {
      prompt: prompt.length > 0 ? prompt : null,
      subject_token: useToken ? "auto" : null,
      tau: hasStroke ? Number(this.input("spec-tau").value) : null,
      scale: Number(this.input("spec-scale").value),
      seed: Number(this.input("spec-seed").value),
      num_outputs: Number(this.input("spec-outputs").value),
      num_steps: Number(this.input("spec-steps").value),
      attn_mask: this.input("spec-attn-mask").checked,
    };
  }

  async submitJob(spec?: GuidanceSpecWire): Promise<void> {
    if (!this.session) return this.notify("create a session first");
    spec = spec ?? this.readSpecFromPanel();
    const stroke = this.doc ? await this.exportStrokeBlob() : undefined;
    try {
      const job = await this.client.submitJob(this.session.id, spec, stroke);
      this.notify(`job ${job.id} submitted`);
      const settled = await this.client.waitForJob(job.id);
      if (settled.status === "failed") return this.notify(settled.error ?? "job failed");
      this.gallery.add(settled);
      this.renderGallery();
    } catch (err) {
      this.notify(String(err));
    }
  }

  renderGallery(): void {
    const grid = this.el("gallery");
    grid.replaceChildren();
    for (const entry of this.gallery.entries()) {
      for (let i = 0; i < entry.artifactCount; i++) {
        const card = this.root.createElement("figure");
        card.className = "card";
        const img = this.root.createElement("img");
        img.src = this.client.artifactUrl(entry.jobId, i);
        const caption = this.root.createElement("figcaption");
        const badge =
          entry.rmseMean !== null ? ` · rmse ${entry.rmseMean.toFixed(4)}` : "";
        caption.textContent = `seed ${entry.spec.seed}${badge}`;
        const again = this.root.createElement("button");
        again.textContent = "resubmit";
        again.onclick = () => void this.submitJob(this.gallery.resubmitSpec(entry.jobId));
        const reseed = this.root.createElement("button");
        reseed.textContent = "new seed";
        reseed.onclick = () =>
          void this.submitJob(
            this.gallery.variant(entry.jobId, "seed", entry.spec.seed + 1),
          );
        caption.append(" ", again, " ", reseed);
        card.append(img, caption);
        grid.append(card);
      }
    }
  }

  notify(message: string): void {
    this.el("status-line").textContent = message;
  }

  // -- event hookup ----------------------------------------------------------

  bind(): void {
    const overlay = this.canvas("layer-overlay");
    const position = (ev: PointerEvent) => {
      const rect = overlay.getBoundingClientRect();
      return {
        x: ((ev.clientX - rect.left) / rect.width) * overlay.width,
        y: ((ev.clientY - rect.top) / rect.height) * overlay.height,
      };
    };
    overlay.addEventListener("pointerdown", (ev) => {
      if (!this.doc) return;
      this.painting = true;
      this.doc.beginGesture();
      const p = position(ev);
      this.applyBrush(p.x, p.y);
    });
    overlay.addEventListener("pointermove", (ev) => {
      if (!this.painting) return;
      const p = position(ev);
      this.applyBrush(p.x, p.y);
    });
    const stop = () => {
      this.painting = false;
      this.doc?.endGesture();
    };
    overlay.addEventListener("pointerup", stop);
    overlay.addEventListener("pointerleave", stop);

    this.el("undo").onclick = () => {
      this.doc?.undo();
      this.render();
    };
    for (const tool of ["mask", "mask-erase", "stroke", "stroke-erase"] as Tool[]) {
      this.el(`tool-${tool}`).onclick = () => {
        this.tool = tool;
      };
    }
    this.input("brush-size").oninput = () => {
      if (this.doc) this.doc.brushSize = Number(this.input("brush-size").value);
    };
    this.input("stroke-color").oninput = () => {
      if (!this.doc) return;
      const hex = this.input("stroke-color").value;
      this.doc.strokeColor = [
        parseInt(hex.slice(1, 3), 16),
        parseInt(hex.slice(3, 5), 16),
        parseInt(hex.slice(5, 7), 16),
      ];
    };
    this.input("image-file").onchange = () => {
      const file = this.input("image-file").files?.[0];
      if (file) void this.loadImageFile(file);
    };
    this.el("create-session").onclick = () => void this.createSession();
    this.el("start-finetune").onclick = () => void this.startFinetune();
    this.el("submit-job").onclick = () => void this.submitJob();
  }
}

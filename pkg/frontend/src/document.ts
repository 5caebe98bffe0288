/** Layered painting document backing the editor canvases.
 *
 * Layers are raw rasters so the logic is testable off-DOM:
 * - base: RGBA pixels of the loaded image (read-only here),
 * - mask: one byte per pixel, 1 = known/kept, 0 = hole to inpaint,
 * - stroke: RGBA pixels; alpha > 0 exactly where painted.
 *
 * Invariants: layers share the base dimensions; stroke pixels exist only
 * where the mask is unknown. Painting the mask back to known clears any
 * stroke underneath, so the invariant survives every edit order.
 */

export class EmptyMaskError extends Error {
  constructor() {
    super("mask is empty: paint the region to inpaint before exporting");
  }
}

export interface BrushSample {
  x: number;
  y: number;
}

interface Snapshot {
  mask: Uint8Array;
  stroke: Uint8ClampedArray;
}

const MAX_UNDO = 64;

export class CanvasDocument {
  readonly width: number;
  readonly height: number;
  readonly base: Uint8ClampedArray;
  mask: Uint8Array;
  stroke: Uint8ClampedArray;

  brushSize = 16;
  strokeColor: [number, number, number] = [255, 0, 0];

  private undoStack: Snapshot[] = [];
  private strokeOpen = false;

  constructor(width: number, height: number, base?: Uint8ClampedArray) {
    if (width <= 0 || height <= 0) {
      throw new Error(`bad document dimensions ${width}x${height}`);
    }
    if (base !== undefined && base.length !== width * height * 4) {
      throw new Error("base layer does not match document dimensions");
    }
    this.width = width;
    this.height = height;
    this.base = base ?? new Uint8ClampedArray(width * height * 4);
    this.mask = new Uint8Array(width * height).fill(1);
    this.stroke = new Uint8ClampedArray(width * height * 4);
  }

  // -- edits ---------------------------------------------------------------

  /** Start one undoable brush gesture (pointer-down to pointer-up). */
  beginGesture(): void {
    if (this.strokeOpen) return;
    this.strokeOpen = true;
    this.undoStack.push({ mask: this.mask.slice(), stroke: this.stroke.slice() });
    if (this.undoStack.length > MAX_UNDO) this.undoStack.shift();
  }

  endGesture(): void {
    this.strokeOpen = false;
  }

  undo(): boolean {
    const snap = this.undoStack.pop();
    if (!snap) return false;
    this.mask = snap.mask;
    this.stroke = snap.stroke;
    this.strokeOpen = false;
    return true;
  }

  get undoDepth(): number {
    return this.undoStack.length;
  }

  /** Paint hole pixels (mask -> unknown) under a circular stamp. */
  paintMask(at: BrushSample): number {
    return this.stamp(at, (i) => {
      if (this.mask[i] === 0) return 0;
      this.mask[i] = 0;
      return 1;
    });
  }

  /** Restore known pixels; clears any stroke underneath to keep the invariant. */
  eraseMask(at: BrushSample): number {
    return this.stamp(at, (i) => {
      if (this.mask[i] === 1) return 0;
      this.mask[i] = 1;
      this.stroke[i * 4 + 3] = 0;
      return 1;
    });
  }

  /** Deposit stroke color; rejected outside the hole (returns pixels painted). */
  paintStroke(at: BrushSample): number {
    const [r, g, b] = this.strokeColor;
    return this.stamp(at, (i) => {
      if (this.mask[i] === 1) return 0; // brush rejected on known region
      const o = i * 4;
      this.stroke[o] = r;
      this.stroke[o + 1] = g;
      this.stroke[o + 2] = b;
      this.stroke[o + 3] = 255;
      return 1;
    });
  }

  eraseStroke(at: BrushSample): number {
    return this.stamp(at, (i) => {
      if (this.stroke[i * 4 + 3] === 0) return 0;
      this.stroke[i * 4 + 3] = 0;
      return 1;
    });
  }

  private stamp(at: BrushSample, visit: (index: number) => number): number {
    const r = Math.max(0, (this.brushSize - 1) / 2);
    const cx = Math.round(at.x);
    const cy = Math.round(at.y);
    let changed = 0;
    const lo = Math.floor(-r);
    const hi = Math.ceil(r);
    for (let dy = lo; dy <= hi; dy++) {
      for (let dx = lo; dx <= hi; dx++) {
        if (dx * dx + dy * dy > r * r) continue;
        const x = cx + dx;
        const y = cy + dy;
        if (x < 0 || y < 0 || x >= this.width || y >= this.height) continue;
        changed += visit(y * this.width + x);
      }
    }
    return changed;
  }

  // -- queries -------------------------------------------------------------

  holePixelCount(): number {
    let n = 0;
    for (const v of this.mask) if (v === 0) n++;
    return n;
  }

  strokePixelCount(): number {
    let n = 0;
    for (let i = 3; i < this.stroke.length; i += 4) if (this.stroke[i] > 0) n++;
    return n;
  }

  /** True iff no stroke pixel sits on a known-region pixel. */
  invariantHolds(): boolean {
    for (let i = 0; i < this.mask.length; i++) {
      if (this.stroke[i * 4 + 3] > 0 && this.mask[i] === 1) return false;
    }
    return true;
  }

  // -- export --------------------------------------------------------------

  /** Grayscale mask raster: known = 255, hole = 0. Throws if nothing painted. */
  exportMask(): Uint8ClampedArray {
    if (this.holePixelCount() === 0) throw new EmptyMaskError();
    const out = new Uint8ClampedArray(this.width * this.height);
    for (let i = 0; i < this.mask.length; i++) out[i] = this.mask[i] === 1 ? 255 : 0;
    return out;
  }

  /** RGBA stroke raster, pixel-exact with the on-screen layer. */
  exportStroke(): Uint8ClampedArray {
    return this.stroke.slice();
  }

  /** Rebuild layers from exported rasters (used for echo verification). */
  static fromRasters(
    width: number,
    height: number,
    mask: Uint8ClampedArray,
    stroke: Uint8ClampedArray,
  ): CanvasDocument {
    if (mask.length !== width * height || stroke.length !== width * height * 4) {
      throw new Error("raster dimensions do not match document");
    }
    const doc = new CanvasDocument(width, height);
    for (let i = 0; i < mask.length; i++) doc.mask[i] = mask[i] >= 128 ? 1 : 0;
    doc.stroke = stroke.slice();
    if (!doc.invariantHolds()) {
      throw new Error("imported stroke layer has pixels on the known region");
    }
    return doc;
  }
}

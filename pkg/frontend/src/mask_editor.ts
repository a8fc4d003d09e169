/**
 * Editable per-slice mask bitmaps with brush strokes and undo.
 *
 * Edits stay local until the review is submitted; the undo stack keeps at
 * least UNDO_DEPTH stroke snapshots.
 */

import { Rle, decodeRle, encodeRle } from "./rle.js";

export const UNDO_DEPTH = 30;

export type BrushMode = "add" | "erase";

interface StrokeSnapshot {
  sliceIndex: number;
  before: Uint8Array;
}

export class MaskEditor {
  readonly rows: number;
  readonly cols: number;
  readonly nSlices: number;
  private slices: Uint8Array[];
  private original: Uint8Array[];
  private undoStack: StrokeSnapshot[] = [];
  private strokeOpen = false;

  constructor(rows: number, cols: number, nSlices: number, initial?: Rle[]) {
    this.rows = rows;
    this.cols = cols;
    this.nSlices = nSlices;
    const size = rows * cols;
    this.slices = [];
    this.original = [];
    for (let k = 0; k < nSlices; k++) {
      const flat = initial ? decodeRle(initial[k], size) : new Uint8Array(size);
      this.slices.push(flat);
      this.original.push(new Uint8Array(flat));
    }
  }

  bitmap(sliceIndex: number): Uint8Array {
    return this.slices[sliceIndex];
  }

  /** Start one brush stroke: everything until endStroke() is one undo step. */
  beginStroke(sliceIndex: number): void {
    if (this.strokeOpen) return;
    this.strokeOpen = true;
    this.undoStack.push({
      sliceIndex,
      before: new Uint8Array(this.slices[sliceIndex]),
    });
    if (this.undoStack.length > UNDO_DEPTH) {
      this.undoStack.shift();
    }
  }

  endStroke(): void {
    this.strokeOpen = false;
  }

  /** Stamp a filled circle at voxel (x, y); out-of-bounds parts are clipped. */
  paint(sliceIndex: number, x: number, y: number, radiusPx: number, mode: BrushMode): void {
    const flat = this.slices[sliceIndex];
    const value = mode === "add" ? 1 : 0;
    const r = Math.max(0, radiusPx);
    const r2 = r * r;
    const x0 = Math.max(0, Math.ceil(x - r));
    const x1 = Math.min(this.cols - 1, Math.floor(x + r));
    const y0 = Math.max(0, Math.ceil(y - r));
    const y1 = Math.min(this.rows - 1, Math.floor(y + r));
    for (let py = y0; py <= y1; py++) {
      for (let px = x0; px <= x1; px++) {
        const dx = px - x;
        const dy = py - y;
        if (dx * dx + dy * dy <= r2) {
          flat[py * this.cols + px] = value;
        }
      }
    }
  }

  undo(): boolean {
    const snapshot = this.undoStack.pop();
    if (!snapshot) return false;
    this.slices[snapshot.sliceIndex] = snapshot.before;
    this.strokeOpen = false;
    return true;
  }

  get undoDepth(): number {
    return this.undoStack.length;
  }

  isDirty(): boolean {
    return this.dirtySlices().length > 0;
  }

  dirtySlices(): number[] {
    const dirty: number[] = [];
    for (let k = 0; k < this.nSlices; k++) {
      const a = this.slices[k];
      const b = this.original[k];
      for (let i = 0; i < a.length; i++) {
        if (a[i] !== b[i]) {
          dirty.push(k);
          break;
        }
      }
    }
    return dirty;
  }

  toRle(): Rle[] {
    return this.slices.map((flat) => encodeRle(flat));
  }

  /** Accept the current state as the new baseline (after a successful submit). */
  markClean(): void {
    this.original = this.slices.map((flat) => new Uint8Array(flat));
    this.undoStack = [];
  }

  /** Throw away local edits, returning to the baseline. */
  reset(): void {
    this.slices = this.original.map((flat) => new Uint8Array(flat));
    this.undoStack = [];
  }
}

/**
 * Display <-> voxel coordinate mapping for a canvas drawn at an integer
 * scale factor. Within bounds the round trip voxel -> display -> voxel is
 * the identity.
 */
export class DisplayTransform {
  constructor(readonly scale: number) {
    if (!Number.isInteger(scale) || scale < 1) {
      throw new Error("scale must be a positive integer");
    }
  }

  displayToVoxel(px: number, py: number): [number, number] {
    return [Math.floor(px / this.scale), Math.floor(py / this.scale)];
  }

  voxelToDisplayCenter(x: number, y: number): [number, number] {
    return [x * this.scale + this.scale / 2, y * this.scale + this.scale / 2];
  }
}

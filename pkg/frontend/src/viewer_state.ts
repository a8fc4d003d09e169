/** Viewer state machine: slice navigation, overlay mode, brush settings. */

import { CaseBundle } from "./api.js";
import { MaskEditor } from "./mask_editor.js";

export type OverlayMode = "none" | "mask" | "heatmap";
export type ErrorClass =
  | "false_positive"
  | "false_negative"
  | "boundary_inaccuracy"
  | "correct";

export const ERROR_CLASSES: ErrorClass[] = [
  "false_positive",
  "false_negative",
  "boundary_inaccuracy",
  "correct",
];

export interface BrushSettings {
  radiusPx: number;
  mode: "add" | "erase";
}

export class ViewerState {
  bundle: CaseBundle | null = null;
  editor: MaskEditor | null = null;
  sliceIndex = 0;
  overlayMode: OverlayMode = "mask";
  brush: BrushSettings = { radiusPx: 1.5, mode: "add" };
  pendingErrorClass: ErrorClass | null = null;

  loadBundle(bundle: CaseBundle): void {
    this.bundle = bundle;
    this.editor = new MaskEditor(bundle.rows, bundle.cols, bundle.n_slices,
                                 bundle.mask_rle);
    this.sliceIndex = Math.floor(bundle.n_slices / 2);
    this.pendingErrorClass = null;
  }

  get nSlices(): number {
    return this.bundle ? this.bundle.n_slices : 0;
  }

  setSlice(index: number): void {
    if (!this.bundle) return;
    this.sliceIndex = Math.min(Math.max(index, 0), this.bundle.n_slices - 1);
  }

  nextSlice(): void {
    this.setSlice(this.sliceIndex + 1);
  }

  previousSlice(): void {
    this.setSlice(this.sliceIndex - 1);
  }

  get isPositive(): boolean {
    return this.bundle?.report.kind === "positive_mask_overlay";
  }
}

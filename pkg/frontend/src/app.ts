/**
 * The review application: worklist pane, slice viewer with mask/heatmap
 * overlays and confidence labels, brush touch-up, and review submission.
 *
 * All mask edits are buffered in the MaskEditor until submit; a failed
 * submit keeps the local edits so nothing is lost.
 */

import { ApiClient, CaseSummary } from "./api.js";
import { DisplayTransform, MaskEditor } from "./mask_editor.js";
import {
  compositeHeatmap,
  decodeBase64,
  grayToRgba,
  maskOutline,
  paintOverlay,
} from "./raster.js";
import { ERROR_CLASSES, ErrorClass, ViewerState } from "./viewer_state.js";

const SCALE = 6;

export class App {
  readonly api: ApiClient;
  readonly state = new ViewerState();
  readonly transform = new DisplayTransform(SCALE);
  currentCaseId: string | null = null;
  statusText = "";

  private root: HTMLElement;
  private worklistPane!: HTMLUListElement;
  private canvas!: HTMLCanvasElement;
  private sliceLabel!: HTMLSpanElement;
  private sliceSlider!: HTMLInputElement;
  private infoPane!: HTMLElement;
  private statusLine!: HTMLElement;
  private errorSelect!: HTMLSelectElement;
  private painting = false;

  constructor(root: HTMLElement, api: ApiClient, private author = "reviewer") {
    this.root = root;
    this.api = api;
    this.buildDom();
  }

  get editor(): MaskEditor | null {
    return this.state.editor;
  }

  // --- DOM scaffolding -------------------------------------------------------

  private buildDom(): void {
    this.root.innerHTML = "";
    this.root.classList.add("hemoloop-app");

    const worklist = el("section", "worklist-pane");
    worklist.appendChild(el("h2", "", "Worklist"));
    this.worklistPane = el("ul", "worklist") as HTMLUListElement;
    worklist.appendChild(this.worklistPane);

    const viewer = el("section", "viewer-pane");
    this.canvas = document.createElement("canvas");
    this.canvas.className = "slice-canvas";
    viewer.appendChild(this.canvas);

    const controls = el("div", "controls");
    const prev = button("prev", "<", () => { this.state.previousSlice(); this.render(); });
    const next = button("next", ">", () => { this.state.nextSlice(); this.render(); });
    this.sliceSlider = document.createElement("input");
    this.sliceSlider.type = "range";
    this.sliceSlider.addEventListener("input", () => {
      this.state.setSlice(Number(this.sliceSlider.value));
      this.render();
    });
    this.sliceLabel = el("span", "slice-label") as HTMLSpanElement;
    controls.append(prev, this.sliceSlider, next, this.sliceLabel);

    for (const mode of ["none", "mask", "heatmap"] as const) {
      controls.appendChild(button(`overlay-${mode}`, mode, () => {
        this.state.overlayMode = mode;
        this.render();
      }));
    }
    controls.appendChild(button("brush-add", "brush +", () => {
      this.state.brush.mode = "add";
    }));
    controls.appendChild(button("brush-erase", "brush -", () => {
      this.state.brush.mode = "erase";
    }));
    controls.appendChild(button("undo", "undo", () => {
      this.state.editor?.undo();
      this.render();
    }));
    viewer.appendChild(controls);

    const review = el("section", "review-pane");
    this.infoPane = el("div", "case-info");
    review.appendChild(this.infoPane);
    this.errorSelect = document.createElement("select");
    this.errorSelect.className = "error-class";
    const blank = document.createElement("option");
    blank.value = "";
    blank.textContent = "error class...";
    this.errorSelect.appendChild(blank);
    for (const cls of ERROR_CLASSES) {
      const option = document.createElement("option");
      option.value = cls;
      option.textContent = cls;
      this.errorSelect.appendChild(option);
    }
    review.appendChild(this.errorSelect);
    review.appendChild(button("submit", "submit review", () => {
      const cls = this.errorSelect.value as ErrorClass;
      if (cls) void this.submitReview(cls);
    }));
    this.statusLine = el("div", "status-line");
    review.appendChild(this.statusLine);

    this.root.append(worklist, viewer, review);
    this.wireCanvasEvents();
  }

  private wireCanvasEvents(): void {
    this.canvas.addEventListener("mousedown", (event) => {
      this.painting = true;
      this.paintFromEvent(event);
    });
    this.canvas.addEventListener("mousemove", (event) => {
      if (this.painting) this.paintFromEvent(event);
    });
    const stop = () => {
      this.painting = false;
      this.state.editor?.endStroke();
    };
    this.canvas.addEventListener("mouseup", stop);
    this.canvas.addEventListener("mouseleave", stop);
  }

  private paintFromEvent(event: MouseEvent): void {
    const rect = this.canvas.getBoundingClientRect();
    const [x, y] = this.transform.displayToVoxel(
      event.clientX - rect.left, event.clientY - rect.top,
    );
    this.paintAt(this.state.sliceIndex, x, y);
  }

  // --- actions ------------------------------------------------------------------

  async refreshWorklist(filter?: { status?: string }): Promise<CaseSummary[]> {
    const cases = await this.api.worklist(filter);
    this.worklistPane.innerHTML = "";
    for (const row of cases) {
      const item = document.createElement("li");
      item.dataset.caseId = row.case_id;
      item.className = `worklist-item status-${row.status}`;
      const score = row.case_score === null ? "-" : row.case_score.toFixed(2);
      item.textContent = `${row.case_id} [${row.status}] score=${score}`;
      item.addEventListener("click", () => void this.loadCase(row.case_id));
      this.worklistPane.appendChild(item);
    }
    return cases;
  }

  async loadCase(caseId: string): Promise<void> {
    const bundle = await this.api.bundle(caseId);
    this.currentCaseId = caseId;
    this.state.loadBundle(bundle);
    this.sliceSlider.min = "0";
    this.sliceSlider.max = String(bundle.n_slices - 1);
    this.canvas.width = bundle.cols * SCALE;
    this.canvas.height = bundle.rows * SCALE;
    this.renderInfo();
    this.render();
  }

  /** Apply one brush stamp at voxel coordinates on the given slice. */
  paintAt(sliceIndex: number, x: number, y: number): void {
    const editor = this.state.editor;
    if (!editor) return;
    editor.beginStroke(sliceIndex);
    editor.paint(sliceIndex, x, y, this.state.brush.radiusPx, this.state.brush.mode);
    this.render();
  }

  async submitReview(errorClass: ErrorClass): Promise<string | null> {
    const editor = this.state.editor;
    if (!this.currentCaseId || !this.state.bundle || !editor) return null;
    const includeMask = editor.isDirty() || errorClass === "boundary_inaccuracy";
    try {
      const annotationId = await this.api.submitAnnotation(this.currentCaseId, {
        error_class: errorClass,
        author: this.author,
        result_id: this.state.bundle.result_id,
        corrected_mask_rle: includeMask ? editor.toRle() : null,
      });
      editor.markClean();
      this.statusText = `submitted ${annotationId}`;
      this.statusLine.textContent = this.statusText;
      await this.refreshWorklist();
      return annotationId;
    } catch (error) {
      // server rejection: keep local edits, surface the failure
      this.statusText = `submit failed: ${String(error)}`;
      this.statusLine.textContent = this.statusText;
      return null;
    }
  }

  // --- rendering -----------------------------------------------------------------

  private renderInfo(): void {
    const bundle = this.state.bundle;
    if (!bundle) return;
    this.infoPane.innerHTML = "";
    const badge = el("div", this.state.isPositive ? "badge positive" : "badge negative");
    badge.textContent = this.state.isPositive
      ? `ICH detected, ${bundle.total_volume_ml.toFixed(2)} mL`
      : "no ICH detected";
    this.infoPane.appendChild(badge);
    const score = el("div", "case-score");
    score.textContent = `case score ${bundle.case_score.toFixed(3)}`;
    this.infoPane.appendChild(score);
    const lesions = el("ul", "lesions");
    for (const lesion of bundle.lesions) {
      const item = document.createElement("li");
      item.textContent =
        `lesion ${lesion.component_id}: P=${lesion.confidence.toFixed(2)}, ` +
        `${lesion.volume_ml.toFixed(2)} mL`;
      lesions.appendChild(item);
    }
    this.infoPane.appendChild(lesions);
    const disclaimer = el("div", "disclaimer");
    disclaimer.textContent = bundle.report.disclaimer;
    this.infoPane.appendChild(disclaimer);
  }

  render(): void {
    const bundle = this.state.bundle;
    const editor = this.state.editor;
    if (!bundle || !editor) return;
    const k = this.state.sliceIndex;
    this.sliceSlider.value = String(k);
    this.sliceLabel.textContent = `slice ${k + 1}/${bundle.n_slices}`;

    let context: CanvasRenderingContext2D | null = null;
    try {
      context = this.canvas.getContext("2d");
    } catch {
      context = null;  // headless test environments have no canvas 2D
    }
    if (!context) return;

    const { rows, cols } = bundle;
    let rgba = grayToRgba(decodeBase64(bundle.slices[k]));
    if (this.state.overlayMode === "heatmap") {
      rgba = compositeHeatmap(rgba, decodeBase64(bundle.heatmap[k]));
    }
    if (this.state.overlayMode !== "none") {
      const outline = maskOutline(editor.bitmap(k), rows, cols);
      rgba = paintOverlay(rgba, outline, [255, 40, 40], 0.9);
    }
    const image = new ImageData(rgba as Uint8ClampedArray<ArrayBuffer>, cols, rows);
    const offscreen = document.createElement("canvas");
    offscreen.width = cols;
    offscreen.height = rows;
    const offContext = offscreen.getContext("2d");
    if (!offContext) return;
    offContext.putImageData(image, 0, 0);
    context.imageSmoothingEnabled = false;
    context.clearRect(0, 0, this.canvas.width, this.canvas.height);
    context.drawImage(offscreen, 0, 0, this.canvas.width, this.canvas.height);
  }
}

function el(tag: string, className = "", text = ""): HTMLElement {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text) node.textContent = text;
  return node;
}

function button(id: string, label: string, onClick: () => void): HTMLButtonElement {
  const node = document.createElement("button");
  node.id = id;
  node.textContent = label;
  node.addEventListener("click", onClick);
  return node;
}

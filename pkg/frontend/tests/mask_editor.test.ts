import { describe, expect, it } from "vitest";

import { DisplayTransform, MaskEditor, UNDO_DEPTH } from "../src/mask_editor.js";

describe("MaskEditor", () => {
  it("paints and erases the same pixels back to the original", () => {
    const editor = new MaskEditor(16, 16, 4);
    const before = Array.from(editor.bitmap(1));
    editor.beginStroke(1);
    editor.paint(1, 8, 8, 2.5, "add");
    editor.endStroke();
    expect(editor.isDirty()).toBe(true);
    editor.beginStroke(1);
    editor.paint(1, 8, 8, 2.5, "erase");
    editor.endStroke();
    expect(Array.from(editor.bitmap(1))).toEqual(before);
    expect(editor.isDirty()).toBe(false);
  });

  it("clips strokes outside the image without error", () => {
    const editor = new MaskEditor(8, 8, 1);
    editor.beginStroke(0);
    editor.paint(0, -3, -3, 2, "add");
    editor.paint(0, 20, 4, 2, "add");
    editor.endStroke();
    expect(editor.bitmap(0).length).toBe(64);
  });

  it("undo restores the pre-stroke bitmap, stroke by stroke", () => {
    const editor = new MaskEditor(8, 8, 1);
    editor.beginStroke(0);
    editor.paint(0, 2, 2, 1, "add");
    editor.endStroke();
    const afterFirst = Array.from(editor.bitmap(0));
    editor.beginStroke(0);
    editor.paint(0, 5, 5, 1, "add");
    editor.endStroke();
    expect(editor.undo()).toBe(true);
    expect(Array.from(editor.bitmap(0))).toEqual(afterFirst);
    expect(editor.undo()).toBe(true);
    expect(editor.isDirty()).toBe(false);
    expect(editor.undo()).toBe(false);
  });

  it("keeps at least 20 undo steps", () => {
    expect(UNDO_DEPTH).toBeGreaterThanOrEqual(20);
    const editor = new MaskEditor(8, 8, 1);
    for (let i = 0; i < UNDO_DEPTH + 5; i++) {
      editor.beginStroke(0);
      editor.paint(0, i % 8, (i * 3) % 8, 0, "add");
      editor.endStroke();
    }
    expect(editor.undoDepth).toBe(UNDO_DEPTH);
  });

  it("editing one slice leaves all other slices' runs identical", () => {
    const initial = [
      [[0, 3]],
      [[4, 2]],
      [[10, 5]],
    ];
    const editor = new MaskEditor(4, 4, 3, initial);
    editor.beginStroke(1);
    editor.paint(1, 0, 0, 0, "add");
    editor.endStroke();
    const runs = editor.toRle();
    expect(runs[0]).toEqual(initial[0]);
    expect(runs[2]).toEqual(initial[2]);
    expect(editor.dirtySlices()).toEqual([1]);
  });

  it("round-trips initial RLE state", () => {
    const initial = [[[2, 3], [9, 1]]];
    const editor = new MaskEditor(4, 4, 1, initial);
    expect(editor.toRle()).toEqual(initial);
  });
});

describe("DisplayTransform", () => {
  it("display->voxel->display round trip is identity within bounds", () => {
    const t = new DisplayTransform(6);
    for (let x = 0; x < 20; x++) {
      for (let y = 0; y < 20; y++) {
        const [dx, dy] = t.voxelToDisplayCenter(x, y);
        const [vx, vy] = t.displayToVoxel(dx, dy);
        expect([vx, vy]).toEqual([x, y]);
      }
    }
  });

  it("rejects fractional scales", () => {
    expect(() => new DisplayTransform(1.5)).toThrow();
  });
});

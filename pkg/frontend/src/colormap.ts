/**
 * Fixed 256-entry probability heatmap lookup table.
 *
 * Cool (dark blue/purple) at low values, warm (red/yellow) at high values.
 * The table is generated once from the piecewise-linear formula below so
 * rendered screenshots are reproducible; index i covers probability i/255.
 */

function channel(t: number, lo: number, hi: number): number {
  const v = (t - lo) / (hi - lo);
  return Math.max(0, Math.min(255, Math.round(v * 255)));
}

function entry(i: number): [number, number, number] {
  const t = i / 255;
  const r = channel(t, 0.25, 0.65);
  const g = channel(t, 0.55, 0.95);
  const b = Math.max(0, Math.min(255, Math.round((0.6 - t) / 0.6 * 220)));
  return [r, g, b];
}

export const HEATMAP_LUT: ReadonlyArray<readonly [number, number, number]> =
  Array.from({ length: 256 }, (_, i) => entry(i));

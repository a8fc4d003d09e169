/** Slice raster helpers: base64 payload decoding and RGBA compositing. */

import { HEATMAP_LUT } from "./colormap.js";

export function decodeBase64(data: string): Uint8Array {
  if (typeof atob === "function") {
    const binary = atob(data);
    const bytes = new Uint8Array(binary.length);
    for (let i = 0; i < binary.length; i++) bytes[i] = binary.charCodeAt(i);
    return bytes;
  }
  return new Uint8Array(Buffer.from(data, "base64"));
}

export function grayToRgba(gray: Uint8Array): Uint8ClampedArray {
  const out = new Uint8ClampedArray(gray.length * 4);
  for (let i = 0; i < gray.length; i++) {
    const v = gray[i];
    out[i * 4] = v;
    out[i * 4 + 1] = v;
    out[i * 4 + 2] = v;
    out[i * 4 + 3] = 255;
  }
  return out;
}

/** Blend the probability heatmap over a grayscale base (alpha grows with p). */
export function compositeHeatmap(
  base: Uint8ClampedArray,
  heat: Uint8Array,
): Uint8ClampedArray {
  const out = new Uint8ClampedArray(base);
  for (let i = 0; i < heat.length; i++) {
    const p = heat[i];
    if (p === 0) continue;
    const [r, g, b] = HEATMAP_LUT[p];
    const alpha = Math.min(0.75, p / 255);
    out[i * 4] = Math.round(out[i * 4] * (1 - alpha) + r * alpha);
    out[i * 4 + 1] = Math.round(out[i * 4 + 1] * (1 - alpha) + g * alpha);
    out[i * 4 + 2] = Math.round(out[i * 4 + 2] * (1 - alpha) + b * alpha);
  }
  return out;
}

/** Outline pixels: set pixels with at least one unset 4-neighbor. */
export function maskOutline(mask: Uint8Array, rows: number, cols: number): Uint8Array {
  const outline = new Uint8Array(mask.length);
  for (let y = 0; y < rows; y++) {
    for (let x = 0; x < cols; x++) {
      const i = y * cols + x;
      if (!mask[i]) continue;
      const up = y > 0 ? mask[i - cols] : 0;
      const down = y < rows - 1 ? mask[i + cols] : 0;
      const left = x > 0 ? mask[i - 1] : 0;
      const right = x < cols - 1 ? mask[i + 1] : 0;
      if (!(up && down && left && right)) outline[i] = 1;
    }
  }
  return outline;
}

export function paintOverlay(
  base: Uint8ClampedArray,
  pixels: Uint8Array,
  rgb: [number, number, number],
  alpha: number,
): Uint8ClampedArray {
  const out = new Uint8ClampedArray(base);
  for (let i = 0; i < pixels.length; i++) {
    if (!pixels[i]) continue;
    out[i * 4] = Math.round(out[i * 4] * (1 - alpha) + rgb[0] * alpha);
    out[i * 4 + 1] = Math.round(out[i * 4 + 1] * (1 - alpha) + rgb[1] * alpha);
    out[i * 4 + 2] = Math.round(out[i * 4 + 2] * (1 - alpha) + rgb[2] * alpha);
  }
  return out;
}

/**
 * Per-slice mask run-length codec matching the service wire format:
 * runs of set pixels as [start, length] over the row-major flattened slice.
 */

export type Rle = number[][];

export function encodeRle(flat: Uint8Array): Rle {
  const runs: Rle = [];
  let start = -1;
  for (let i = 0; i < flat.length; i++) {
    if (flat[i] && start < 0) {
      start = i;
    } else if (!flat[i] && start >= 0) {
      runs.push([start, i - start]);
      start = -1;
    }
  }
  if (start >= 0) {
    runs.push([start, flat.length - start]);
  }
  return runs;
}

export function decodeRle(runs: Rle, size: number): Uint8Array {
  const flat = new Uint8Array(size);
  let previousEnd = 0;
  for (const [start, length] of runs) {
    if (length < 1 || start < previousEnd || start + length > size) {
      throw new Error(`bad run (${start}, ${length}) for size ${size}`);
    }
    flat.fill(1, start, start + length);
    previousEnd = start + length;
  }
  return flat;
}

export function rleEqual(a: Rle, b: Rle): boolean {
  if (a.length !== b.length) return false;
  for (let i = 0; i < a.length; i++) {
    if (a[i][0] !== b[i][0] || a[i][1] !== b[i][1]) return false;
  }
  return true;
}

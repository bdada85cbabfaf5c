/** Run-length encoding of binary masks, matching the service schema:
 * row-major scan, runs alternate zeros/ones and always start with zeros. */

export interface RleMask {
  width: number;
  height: number;
  counts: number[];
}

export function encodeMask(mask: Uint8Array, width: number, height: number): RleMask {
  if (mask.length !== width * height) {
    throw new Error(`mask length ${mask.length} != ${width}x${height}`);
  }
  const counts: number[] = [];
  let value = 0;
  let run = 0;
  for (let i = 0; i < mask.length; i++) {
    const bit = mask[i] ? 1 : 0;
    if (bit === value) {
      run++;
    } else {
      counts.push(run);
      value = bit;
      run = 1;
    }
  }
  counts.push(run);
  if (mask.length === 0) return { width, height, counts: [] };
  return { width, height, counts };
}

export function decodeMask(rle: RleMask): Uint8Array {
  const total = rle.counts.reduce((a, b) => a + b, 0);
  if (total !== rle.width * rle.height) {
    throw new Error(`RLE covers ${total} pixels, grid has ${rle.width * rle.height}`);
  }
  const mask = new Uint8Array(rle.width * rle.height);
  let pos = 0;
  let value = 0;
  for (const run of rle.counts) {
    if (value) mask.fill(1, pos, pos + run);
    pos += run;
    value = value ? 0 : 1;
  }
  return mask;
}

/** Polygon rasterization at native image resolution.
 *
 * Scanline even-odd fill: a pixel belongs to the mask when its center
 * (x + 0.5, y + 0.5) lies inside the polygon. Vertices are in image
 * pixel coordinates (origin top-left, y down). */

export interface Point {
  x: number;
  y: number;
}

export function rasterizePolygon(vertices: Point[], width: number,
                                 height: number): Uint8Array {
  const mask = new Uint8Array(width * height);
  if (vertices.length < 3) return mask;
  const n = vertices.length;

  let yMin = Infinity;
  let yMax = -Infinity;
  for (const v of vertices) {
    yMin = Math.min(yMin, v.y);
    yMax = Math.max(yMax, v.y);
  }
  const rowStart = Math.max(0, Math.floor(yMin - 0.5));
  const rowEnd = Math.min(height - 1, Math.ceil(yMax));

  for (let row = rowStart; row <= rowEnd; row++) {
    const yc = row + 0.5;
    const crossings: number[] = [];
    for (let i = 0; i < n; i++) {
      const p = vertices[i];
      const q = vertices[(i + 1) % n];
      // half-open in y so shared vertices count once
      if ((p.y <= yc && q.y > yc) || (q.y <= yc && p.y > yc)) {
        crossings.push(p.x + ((yc - p.y) * (q.x - p.x)) / (q.y - p.y));
      }
    }
    crossings.sort((a, b) => a - b);
    for (let k = 0; k + 1 < crossings.length; k += 2) {
      const left = Math.ceil(crossings[k] - 0.5);
      const right = Math.ceil(crossings[k + 1] - 0.5); // exclusive
      for (let col = Math.max(0, left); col < Math.min(width, right); col++) {
        mask[row * width + col] = 1;
      }
    }
  }
  return mask;
}

/** Independent check used by tests: even-odd ray cast per pixel center. */
export function pointInPolygon(px: number, py: number, vertices: Point[]): boolean {
  let inside = false;
  const n = vertices.length;
  for (let i = 0; i < n; i++) {
    const p = vertices[i];
    const q = vertices[(i + 1) % n];
    if ((p.y <= py && q.y > py) || (q.y <= py && p.y > py)) {
      const x = p.x + ((py - p.y) * (q.x - p.x)) / (q.y - p.y);
      if (px < x) inside = !inside;
    }
  }
  return inside;
}

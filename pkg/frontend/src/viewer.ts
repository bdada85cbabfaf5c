/** Canvas image viewer: pixel-faithful grayscale display with wheel zoom,
 * drag pan (right button or space+drag), and polygon drawing on left
 * click. No smoothing anywhere; magnification is nearest-neighbor. */

import { Point } from "./raster.js";

const CLOSE_SNAP_PX = 8; // screen pixels: clicking near the first vertex closes

export class Viewer {
  private ctx: CanvasRenderingContext2D;
  private image: HTMLImageElement | null = null;
  private scale = 1;
  private offsetX = 0;
  private offsetY = 0;
  private panning = false;
  private spaceHeld = false;
  private lastPan = { x: 0, y: 0 };

  polygon: Point[] = [];
  polygonClosed = false;
  onPolygonChange: () => void = () => undefined;

  constructor(private canvas: HTMLCanvasElement) {
    const ctx = canvas.getContext("2d");
    if (!ctx) throw new Error("2d canvas context unavailable");
    this.ctx = ctx;

    canvas.addEventListener("wheel", (e) => this.handleWheel(e), { passive: false });
    canvas.addEventListener("pointerdown", (e) => this.handlePointerDown(e));
    canvas.addEventListener("pointermove", (e) => this.handlePointerMove(e));
    canvas.addEventListener("pointerup", (e) => this.handlePointerUp(e));
    canvas.addEventListener("contextmenu", (e) => e.preventDefault());
    window.addEventListener("keydown", (e) => {
      if (e.code === "Space") this.spaceHeld = true;
    });
    window.addEventListener("keyup", (e) => {
      if (e.code === "Space") this.spaceHeld = false;
    });
  }

  setImage(image: HTMLImageElement): void {
    this.image = image;
    this.canvas.width = Math.max(image.naturalWidth, 1);
    this.canvas.height = Math.max(image.naturalHeight, 1);
    this.scale = 1;
    this.offsetX = 0;
    this.offsetY = 0;
    this.clearPolygon();
    this.render();
  }

  get imageSize(): { width: number; height: number } {
    return {
      width: this.image ? this.image.naturalWidth : 0,
      height: this.image ? this.image.naturalHeight : 0,
    };
  }

  clearPolygon(): void {
    this.polygon = [];
    this.polygonClosed = false;
    this.onPolygonChange();
    this.render();
  }

  /** Canvas/screen position -> image pixel coordinates. */
  toImage(px: number, py: number): Point {
    return { x: (px - this.offsetX) / this.scale, y: (py - this.offsetY) / this.scale };
  }

  private canvasPos(e: PointerEvent | WheelEvent): Point {
    const rect = this.canvas.getBoundingClientRect();
    return { x: e.clientX - rect.left, y: e.clientY - rect.top };
  }

  private handleWheel(e: WheelEvent): void {
    e.preventDefault();
    const pos = this.canvasPos(e);
    const factor = e.deltaY < 0 ? 1.25 : 0.8;
    const next = Math.min(32, Math.max(0.25, this.scale * factor));
    const applied = next / this.scale;
    // keep the pixel under the cursor fixed
    this.offsetX = pos.x - (pos.x - this.offsetX) * applied;
    this.offsetY = pos.y - (pos.y - this.offsetY) * applied;
    this.scale = next;
    this.render();
  }

  private handlePointerDown(e: PointerEvent): void {
    const pos = this.canvasPos(e);
    if (e.button === 2 || this.spaceHeld) {
      this.panning = true;
      this.lastPan = pos;
      this.canvas.setPointerCapture(e.pointerId);
      return;
    }
    if (e.button === 0 && this.image && !this.polygonClosed) {
      if (this.polygon.length >= 3) {
        const first = this.polygon[0];
        const fx = first.x * this.scale + this.offsetX;
        const fy = first.y * this.scale + this.offsetY;
        if (Math.hypot(pos.x - fx, pos.y - fy) <= CLOSE_SNAP_PX) {
          this.polygonClosed = true;
          this.onPolygonChange();
          this.render();
          return;
        }
      }
      this.polygon.push(this.toImage(pos.x, pos.y));
      this.onPolygonChange();
      this.render();
    }
  }

  private handlePointerMove(e: PointerEvent): void {
    if (!this.panning) return;
    const pos = this.canvasPos(e);
    this.offsetX += pos.x - this.lastPan.x;
    this.offsetY += pos.y - this.lastPan.y;
    this.lastPan = pos;
    this.render();
  }

  private handlePointerUp(e: PointerEvent): void {
    if (this.panning) {
      this.panning = false;
      this.canvas.releasePointerCapture(e.pointerId);
    }
  }

  render(): void {
    const { width, height } = this.canvas;
    this.ctx.save();
    this.ctx.fillStyle = "#111";
    this.ctx.fillRect(0, 0, width, height);
    if (this.image) {
      this.ctx.imageSmoothingEnabled = false; // nearest-neighbor, always
      this.ctx.setTransform(this.scale, 0, 0, this.scale,
                            this.offsetX, this.offsetY);
      this.ctx.drawImage(this.image, 0, 0);
    }
    this.drawPolygon();
    this.ctx.restore();
    this.ctx.setTransform(1, 0, 0, 1, 0, 0);
  }

  private drawPolygon(): void {
    if (this.polygon.length === 0) return;
    this.ctx.lineWidth = 1.5 / this.scale;
    this.ctx.strokeStyle = "#27b0ff";
    this.ctx.fillStyle = "rgba(39, 176, 255, 0.25)";
    this.ctx.beginPath();
    this.ctx.moveTo(this.polygon[0].x, this.polygon[0].y);
    for (const p of this.polygon.slice(1)) this.ctx.lineTo(p.x, p.y);
    if (this.polygonClosed) {
      this.ctx.closePath();
      this.ctx.fill();
    }
    this.ctx.stroke();
    for (const p of this.polygon) {
      this.ctx.beginPath();
      this.ctx.arc(p.x, p.y, 2.5 / this.scale, 0, 2 * Math.PI);
      this.ctx.stroke();
    }
  }
}

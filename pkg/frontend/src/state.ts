/** Annotation view state: three ordinal scores, one polygon (or an
 * explicit "no nodule"), and the submit gate. */

import { Point, rasterizePolygon } from "./raster.js";
import { RleMask, encodeMask } from "./rle.js";

export const SCORE_BOUNDS = {
  quality: [1, 6],
  confidence: [1, 6],
  artifacts: [1, 4],
} as const;

export type ScoreName = keyof typeof SCORE_BOUNDS;
export const SCORE_ORDER: ScoreName[] = ["quality", "confidence", "artifacts"];

export interface ViewState {
  itemId: string | null;
  scores: Partial<Record<ScoreName, number>>;
  polygon: Point[];
  polygonClosed: boolean;
  noNodule: boolean;
}

export function freshState(itemId: string | null = null): ViewState {
  return { itemId, scores: {}, polygon: [], polygonClosed: false, noNodule: false };
}

export function setScore(state: ViewState, name: ScoreName, value: number): boolean {
  const [lo, hi] = SCORE_BOUNDS[name];
  if (!Number.isInteger(value) || value < lo || value > hi) return false;
  state.scores[name] = value;
  return true;
}

/** Assign a digit press to the first unset score group (reading order). */
export function assignDigit(state: ViewState, digit: number): ScoreName | null {
  for (const name of SCORE_ORDER) {
    if (state.scores[name] === undefined) {
      return setScore(state, name, digit) ? name : null;
    }
  }
  return null;
}

export function segmentationReady(state: ViewState): boolean {
  return state.noNodule || (state.polygonClosed && state.polygon.length >= 3);
}

export function canSubmit(state: ViewState): boolean {
  const scored = SCORE_ORDER.every((name) => state.scores[name] !== undefined);
  return state.itemId !== null && scored && segmentationReady(state);
}

export function buildMask(state: ViewState, width: number, height: number): Uint8Array {
  if (state.noNodule || !state.polygonClosed) {
    return new Uint8Array(width * height);
  }
  return rasterizePolygon(state.polygon, width, height);
}

export interface AnnotationPayload {
  item_id: string;
  quality: number;
  confidence: number;
  artifacts: number;
  mask: RleMask;
}

export function buildPayload(state: ViewState, width: number,
                             height: number): AnnotationPayload {
  if (!canSubmit(state)) {
    throw new Error("annotation incomplete: scores or segmentation missing");
  }
  return {
    item_id: state.itemId as string,
    quality: state.scores.quality as number,
    confidence: state.scores.confidence as number,
    artifacts: state.scores.artifacts as number,
    mask: encodeMask(buildMask(state, width, height), width, height),
  };
}

/**
 * Annotation model for drag editing: an ordered list of clicked points
 * where even indices are handles (red) and odd indices are their targets
 * (blue). Pairs must be complete before a job can be submitted.
 */

import { type ImageDims, type Point, snapToImage } from "./coords.js";

export type Role = "handle" | "target";

export const HANDLE_COLOR = "#e23b3b";
export const TARGET_COLOR = "#2b6be2";

export interface Pairing {
  points: Point[];
}

export interface DragPairPoints {
  handle: Point;
  target: Point;
}

export function emptyPairing(): Pairing {
  return { points: [] };
}

export function roleOf(index: number): Role {
  return index % 2 === 0 ? "handle" : "target";
}

/** Which role the next click will get. */
export function nextRole(p: Pairing): Role {
  return roleOf(p.points.length);
}

/** Append a click; the point snaps onto the image grid. */
export function addPoint(p: Pairing, click: Point, image: ImageDims): Pairing {
  return { points: [...p.points, snapToImage(click, image)] };
}

/** Drag-to-adjust: move an existing point, snapped to bounds. */
export function movePoint(
  p: Pairing,
  index: number,
  to: Point,
  image: ImageDims,
): Pairing {
  if (index < 0 || index >= p.points.length) return p;
  const points = p.points.slice();
  points[index] = snapToImage(to, image);
  return { points };
}

export function removeLastPoint(p: Pairing): Pairing {
  return { points: p.points.slice(0, -1) };
}

/** Index of the closest point within `radius` image pixels, or -1. */
export function hitTest(p: Pairing, at: Point, radius: number): number {
  let best = -1;
  let bestDist = radius;
  p.points.forEach((pt, i) => {
    const d = Math.hypot(pt.x - at.x, pt.y - at.y);
    if (d <= bestDist) {
      best = i;
      bestDist = d;
    }
  });
  return best;
}

export function completePairs(p: Pairing): DragPairPoints[] {
  const pairs: DragPairPoints[] = [];
  for (let i = 0; i + 1 < p.points.length; i += 2) {
    pairs.push({ handle: p.points[i], target: p.points[i + 1] });
  }
  return pairs;
}

/** [handle_x, handle_y, target_x, target_y] rows, the service wire format. */
export function pairsAsQuads(p: Pairing): number[][] {
  return completePairs(p).map(({ handle, target }) => [
    handle.x,
    handle.y,
    target.x,
    target.y,
  ]);
}

/** Null when submittable, otherwise a user-facing message. */
export function validateForSubmit(p: Pairing): string | null {
  if (p.points.length === 0) {
    return "Click at least one handle/target pair on the image.";
  }
  if (p.points.length % 2 !== 0) {
    return "Unfinished pair: every handle (red) needs a target (blue).";
  }
  return null;
}

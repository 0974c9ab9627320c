/**
 * Coordinate mapping between browser clicks and image pixels.
 *
 * The canvas element may be CSS-scaled arbitrarily; everything sent to the
 * service must be in original image pixel space, as exact integers.
 */

export interface Point {
  x: number;
  y: number;
}

export interface ImageDims {
  width: number;
  height: number;
}

/** The subset of DOMRect the math needs; plain objects work in tests. */
export interface CanvasRect {
  left: number;
  top: number;
  width: number;
  height: number;
}

function clampIndex(value: number, size: number): number {
  if (value < 0) return 0;
  if (value > size - 1) return size - 1;
  return value;
}

/** Snap an arbitrary point onto the image grid, inside bounds. */
export function snapToImage(p: Point, image: ImageDims): Point {
  return {
    x: clampIndex(Math.floor(p.x), image.width),
    y: clampIndex(Math.floor(p.y), image.height),
  };
}

/**
 * Convert a pointer event position (client coordinates) to the integer
 * image pixel under the cursor. Clicks outside the canvas clamp to the
 * nearest edge pixel, so points always land in bounds.
 */
export function clientToImage(
  clientX: number,
  clientY: number,
  rect: CanvasRect,
  image: ImageDims,
): Point {
  const sx = image.width / rect.width;
  const sy = image.height / rect.height;
  return snapToImage(
    { x: (clientX - rect.left) * sx, y: (clientY - rect.top) * sy },
    image,
  );
}

/**
 * Center of an image pixel in canvas drawing coordinates, for a canvas
 * whose backing store is `zoom` device pixels per image pixel.
 */
export function imageToCanvas(p: Point, zoom: number): Point {
  return { x: (p.x + 0.5) * zoom, y: (p.y + 0.5) * zoom };
}

/** Largest integer zoom that fits the image into maxSide, at least 1. */
export function fitZoom(image: ImageDims, maxSide: number): number {
  const larger = Math.max(image.width, image.height);
  return Math.max(1, Math.floor(maxSide / larger));
}

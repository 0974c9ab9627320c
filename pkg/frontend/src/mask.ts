/**
 * Binary editable-region mask painted with a circular brush.
 *
 * Values are 0 (locked) or 255 (editable); the service treats >127 as
 * editable. The raster converts losslessly to grayscale RGBA, so a PNG
 * written from it round-trips pixel-exact.
 */

export interface MaskRaster {
  width: number;
  height: number;
  data: Uint8Array; // row-major, one byte per pixel
}

export function createMask(width: number, height: number, fill = 0): MaskRaster {
  if (width < 1 || height < 1) {
    throw new Error(`mask dimensions must be positive, got ${width}x${height}`);
  }
  const data = new Uint8Array(width * height);
  if (fill) data.fill(fill);
  return { width, height, data };
}

/**
 * Stamp a filled circle of `value` (255 paints, 0 erases) centered on an
 * image pixel. Inclusion rule: squared distance <= radius^2, so a radius
 * of 0 touches exactly one pixel.
 */
export function paintCircle(
  mask: MaskRaster,
  cx: number,
  cy: number,
  radius: number,
  value: 0 | 255,
): void {
  const r2 = radius * radius;
  const x0 = Math.max(0, Math.ceil(cx - radius));
  const x1 = Math.min(mask.width - 1, Math.floor(cx + radius));
  const y0 = Math.max(0, Math.ceil(cy - radius));
  const y1 = Math.min(mask.height - 1, Math.floor(cy + radius));
  for (let y = y0; y <= y1; y++) {
    for (let x = x0; x <= x1; x++) {
      const dx = x - cx;
      const dy = y - cy;
      if (dx * dx + dy * dy <= r2) {
        mask.data[y * mask.width + x] = value;
      }
    }
  }
}

export function anyEditable(mask: MaskRaster): boolean {
  return mask.data.some((v) => v > 127);
}

/** Expand to opaque grayscale RGBA, ready for a canvas or a PNG encoder. */
export function maskToRgba(mask: MaskRaster) {
  const out = new Uint8ClampedArray(mask.width * mask.height * 4);
  for (let i = 0; i < mask.data.length; i++) {
    const v = mask.data[i];
    out[i * 4] = v;
    out[i * 4 + 1] = v;
    out[i * 4 + 2] = v;
    out[i * 4 + 3] = 255;
  }
  return out;
}

/** Collapse RGBA back to a binary raster with the service's >127 rule. */
export function rgbaToMask(
  rgba: Uint8Array | Uint8ClampedArray,
  width: number,
  height: number,
): MaskRaster {
  if (rgba.length !== width * height * 4) {
    throw new Error(
      `rgba buffer is ${rgba.length} bytes, expected ${width * height * 4}`,
    );
  }
  const mask = createMask(width, height);
  for (let i = 0; i < mask.data.length; i++) {
    mask.data[i] = rgba[i * 4] > 127 ? 255 : 0;
  }
  return mask;
}

export function masksEqual(a: MaskRaster, b: MaskRaster): boolean {
  if (a.width !== b.width || a.height !== b.height) return false;
  return a.data.every((v, i) => v === b.data[i]);
}

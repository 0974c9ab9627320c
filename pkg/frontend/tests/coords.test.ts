import { describe, expect, it } from "vitest";

import {
  clientToImage,
  fitZoom,
  imageToCanvas,
  snapToImage,
} from "../src/coords.js";

const image = { width: 16, height: 16 };

describe("clientToImage", () => {
  it("maps clicks on a 2x-scaled canvas to exact integer pixels", () => {
    const rect = { left: 10, top: 20, width: 32, height: 32 };
    for (let px = 0; px < 16; px++) {
      // click in the middle of each displayed pixel cell
      const p = clientToImage(10 + px * 2 + 1, 20 + 7 * 2 + 1, rect, image);
      expect(p).toEqual({ x: px, y: 7 });
      expect(Number.isInteger(p.x)).toBe(true);
      expect(Number.isInteger(p.y)).toBe(true);
    }
  });

  it("maps corners of the displayed area to corner pixels", () => {
    const rect = { left: 100, top: 50, width: 512, height: 512 };
    expect(clientToImage(100, 50, rect, image)).toEqual({ x: 0, y: 0 });
    expect(clientToImage(100 + 511.9, 50 + 511.9, rect, image)).toEqual({ x: 15, y: 15 });
  });

  it("handles non-square display scaling per axis", () => {
    const rect = { left: 0, top: 0, width: 48, height: 96 };
    expect(clientToImage(3 * 5 + 1, 6 * 9 + 3, rect, image)).toEqual({ x: 5, y: 9 });
  });

  it("clamps clicks outside the canvas to the nearest edge pixel", () => {
    const rect = { left: 10, top: 10, width: 32, height: 32 };
    expect(clientToImage(0, 0, rect, image)).toEqual({ x: 0, y: 0 });
    expect(clientToImage(999, 5, rect, image)).toEqual({ x: 15, y: 0 });
    expect(clientToImage(11, 999, rect, image)).toEqual({ x: 0, y: 15 });
  });
});

describe("snapToImage", () => {
  it("floors fractional coordinates and clamps to bounds", () => {
    expect(snapToImage({ x: 4.9, y: 0.2 }, image)).toEqual({ x: 4, y: 0 });
    expect(snapToImage({ x: -3, y: 99 }, image)).toEqual({ x: 0, y: 15 });
  });
});

describe("imageToCanvas", () => {
  it("places overlay marks at pixel centers", () => {
    expect(imageToCanvas({ x: 5, y: 9 }, 3)).toEqual({ x: 16.5, y: 28.5 });
    expect(imageToCanvas({ x: 0, y: 0 }, 1)).toEqual({ x: 0.5, y: 0.5 });
  });
});

describe("fitZoom", () => {
  it("picks the largest integer zoom that fits", () => {
    expect(fitZoom({ width: 16, height: 16 }, 512)).toBe(32);
    expect(fitZoom({ width: 16, height: 24 }, 512)).toBe(21);
    expect(fitZoom({ width: 1000, height: 1000 }, 512)).toBe(1);
  });
});

import { describe, expect, it } from "vitest";

import {
  addPoint,
  completePairs,
  emptyPairing,
  hitTest,
  movePoint,
  nextRole,
  pairsAsQuads,
  removeLastPoint,
  roleOf,
  validateForSubmit,
} from "../src/pairing.js";

const image = { width: 16, height: 16 };

describe("click roles", () => {
  it("alternate handle, target, handle, target", () => {
    let p = emptyPairing();
    expect(nextRole(p)).toBe("handle");
    p = addPoint(p, { x: 2, y: 2 }, image);
    expect(nextRole(p)).toBe("target");
    p = addPoint(p, { x: 9, y: 2 }, image);
    expect(nextRole(p)).toBe("handle");
    expect(roleOf(0)).toBe("handle");
    expect(roleOf(1)).toBe("target");
  });

  it("snap out-of-bounds clicks into the image", () => {
    const p = addPoint(emptyPairing(), { x: -5, y: 99 }, image);
    expect(p.points[0]).toEqual({ x: 0, y: 15 });
  });
});

describe("submission validation", () => {
  it("blocks an empty annotation", () => {
    expect(validateForSubmit(emptyPairing())).toMatch(/at least one/);
  });

  it("blocks an odd point count with a pairing message", () => {
    let p = addPoint(emptyPairing(), { x: 1, y: 1 }, image);
    expect(validateForSubmit(p)).toMatch(/Unfinished pair/);
    p = addPoint(p, { x: 5, y: 5 }, image);
    p = addPoint(p, { x: 8, y: 8 }, image);
    expect(validateForSubmit(p)).toMatch(/Unfinished pair/);
  });

  it("accepts one complete pair", () => {
    let p = addPoint(emptyPairing(), { x: 1, y: 1 }, image);
    p = addPoint(p, { x: 5, y: 5 }, image);
    expect(validateForSubmit(p)).toBeNull();
  });
});

describe("wire format", () => {
  it("emits [hx, hy, tx, ty] rows for complete pairs only", () => {
    let p = emptyPairing();
    p = addPoint(p, { x: 5, y: 8 }, image);
    p = addPoint(p, { x: 11, y: 8 }, image);
    p = addPoint(p, { x: 2, y: 3 }, image); // dangling handle
    expect(pairsAsQuads(p)).toEqual([[5, 8, 11, 8]]);
    expect(completePairs(p)).toHaveLength(1);
  });
});

describe("drag to adjust", () => {
  it("finds the nearest point within the radius", () => {
    let p = addPoint(emptyPairing(), { x: 4, y: 4 }, image);
    p = addPoint(p, { x: 12, y: 12 }, image);
    expect(hitTest(p, { x: 5, y: 4 }, 2)).toBe(0);
    expect(hitTest(p, { x: 11, y: 12 }, 2)).toBe(1);
    expect(hitTest(p, { x: 8, y: 8 }, 2)).toBe(-1);
  });

  it("moves a point and keeps it in bounds", () => {
    let p = addPoint(emptyPairing(), { x: 4, y: 4 }, image);
    p = movePoint(p, 0, { x: 200, y: -3 }, image);
    expect(p.points[0]).toEqual({ x: 15, y: 0 });
    expect(movePoint(p, 7, { x: 1, y: 1 }, image)).toBe(p); // bad index is a no-op
  });
});

describe("undo", () => {
  it("removes the most recent click", () => {
    let p = addPoint(emptyPairing(), { x: 1, y: 1 }, image);
    p = addPoint(p, { x: 2, y: 2 }, image);
    p = removeLastPoint(p);
    expect(p.points).toHaveLength(1);
    expect(nextRole(p)).toBe("target");
  });
});

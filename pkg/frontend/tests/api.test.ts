import { describe, expect, it } from "vitest";

import { ApiError, Client } from "../src/api.js";

interface Call {
  url: string;
  init?: RequestInit;
}

function stubFetch(responder: (url: string, init?: RequestInit) => Response) {
  const calls: Call[] = [];
  const fetchFn = async (url: string, init?: RequestInit) => {
    calls.push({ url, init });
    return responder(url, init);
  };
  return { calls, fetchFn };
}

function jsonResponse(body: unknown, status = 200): Response {
  return new Response(JSON.stringify(body), {
    status,
    headers: { "content-type": "application/json" },
  });
}

describe("Client", () => {
  it("posts submissions as JSON and strips trailing slashes from the base", async () => {
    const { calls, fetchFn } = stubFetch(() =>
      jsonResponse({ job_id: "abc", status: "queued" }),
    );
    const client = new Client("http://localhost:9999///", fetchFn);
    const out = await client.submitJob({
      image_png: "aGk=",
      prompt_original: "a blob",
      pairs: [[5, 8, 11, 8]],
    });
    expect(out.job_id).toBe("abc");
    expect(calls[0].url).toBe("http://localhost:9999/jobs");
    expect(calls[0].init?.method).toBe("POST");
    const body = JSON.parse(String(calls[0].init?.body));
    expect(body.pairs).toEqual([[5, 8, 11, 8]]);
  });

  it("passes paging parameters through to the trajectory endpoint", async () => {
    const { calls, fetchFn } = stubFetch(() =>
      jsonResponse({ total: 0, offset: 40, records: [] }),
    );
    const client = new Client("http://h", fetchFn);
    await client.getTrajectory("j1", 40, 25);
    expect(calls[0].url).toBe("http://h/jobs/j1/trajectory?offset=40&limit=25");
  });

  it("surfaces structured service errors as ApiError", async () => {
    const { fetchFn } = stubFetch(() =>
      jsonResponse({ error: { code: "not-found", message: "no such job" } }, 404),
    );
    const client = new Client("http://h", fetchFn);
    const err = await client.getJob("missing").catch((e) => e);
    expect(err).toBeInstanceOf(ApiError);
    expect(err.status).toBe(404);
    expect(err.code).toBe("not-found");
    expect(err.message).toBe("no such job");
  });

  it("falls back to a generic code for non-JSON error bodies", async () => {
    const { fetchFn } = stubFetch(() => new Response("boom", { status: 502 }));
    const client = new Client("http://h", fetchFn);
    const err = await client.getJob("x").catch((e) => e);
    expect(err.code).toBe("http-502");
    expect(err.status).toBe(502);
  });

  it("returns binary endpoints as byte arrays", async () => {
    const bytes = Uint8Array.from([137, 80, 78, 71]);
    const { fetchFn } = stubFetch(
      () => new Response(bytes, { status: 200, headers: { "content-type": "image/png" } }),
    );
    const client = new Client("http://h", fetchFn);
    const out = await client.getMaskPng("j1");
    expect(Array.from(out)).toEqual([137, 80, 78, 71]);
  });

  it("builds preview and result URLs for direct use in img tags", () => {
    const client = new Client("http://h:1234");
    expect(client.previewUrl("j", 30)).toBe("http://h:1234/jobs/j/preview/30");
    expect(client.resultImageUrl("j")).toBe("http://h:1234/jobs/j/result/image");
  });
});

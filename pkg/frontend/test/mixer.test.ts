import { afterEach, beforeEach, describe, expect, it, vi } from "vitest";
import { MixerApi } from "../src/api.js";
import { Mixer } from "../src/mixer.js";
import { lightingSpecSchema } from "../src/state.js";

interface Recorded {
  url: string;
  method: string;
  body: any;
}

/**
 * In-memory stand-in for the relighting service. `manual` mode parks every
 * relight response in `parked` so tests can resolve them out of order.
 */
class FakeService {
  requests: Recorded[] = [];
  parked: Array<(setId: string) => void> = [];
  manual = false;
  fail: { status: number; error: string } | null = null;

  fetch = async (input: string | URL | Request, init?: RequestInit): Promise<Response> => {
    const url = String(input);
    const method = init?.method ?? "GET";
    const body = init?.body ? JSON.parse(String(init.body)) : null;
    this.requests.push({ url, method, body });
    if (this.fail) {
      return json({ detail: { error: this.fail.error } }, this.fail.status);
    }
    if (url.endsWith("/lights")) {
      return json({
        scene: "room",
        lights: [
          { id: 1, kind: "area", color: [1, 0.62, 0.3] },
          { id: 2, kind: "point", color: [0.3, 0.3, 0.3] },
          { id: 3, kind: "point", color: null },
        ],
        sun: 0.4,
        exposure: 48.55,
      });
    }
    if (url.endsWith("/relight")) {
      if (this.manual) {
        return new Promise<Response>((resolve) => {
          this.parked.push((setId) => resolve(json({ frame_set: setId, num_frames: 81 })));
        });
      }
      const setId = body.identity ? "room.input" : `room.set-${shortHash(JSON.stringify(body))}`;
      return json({ frame_set: setId, num_frames: 81 });
    }
    return json({ detail: { error: `no route for ${url}` } }, 404);
  };

  posts(): Recorded[] {
    return this.requests.filter((r) => r.method === "POST");
  }
}

function json(doc: unknown, status = 200): Response {
  return new Response(JSON.stringify(doc), {
    status,
    headers: { "content-type": "application/json" },
  });
}

function shortHash(text: string): string {
  let h = 0;
  for (let i = 0; i < text.length; i++) h = (h * 31 + text.charCodeAt(i)) >>> 0;
  return h.toString(16);
}

async function bootMixer(service: FakeService, debounceMs = 200) {
  const frames: string[] = [];
  const errors: string[] = [];
  const api = new MixerApi("", service.fetch as typeof fetch);
  const mixer = new Mixer(
    api,
    "room",
    {
      onState: () => {},
      onFrames: (set) => frames.push(set),
      onOrbitFrame: () => {},
      onError: (msg) => errors.push(msg),
    },
    debounceMs,
  );
  await mixer.load();
  return { mixer, frames, errors };
}

describe("Mixer", () => {
  it("loads the panel and fetches the input frames via an identity request", async () => {
    const service = new FakeService();
    const { mixer, frames } = await bootMixer(service);
    expect(mixer.state.lights.map((l) => l.on)).toEqual([true, true, false]);
    expect(service.posts()).toHaveLength(1);
    expect(service.posts()[0].body.identity).toBe(true);
    expect(frames).toEqual(["room.input"]);
  });

  it("toggling one light sends exactly one schema-valid POST", async () => {
    const service = new FakeService();
    const { mixer } = await bootMixer(service);
    const before = service.posts().length;
    mixer.toggleLight(2);
    await vi.waitFor(() => expect(service.posts().length).toBe(before + 1));
    const body = service.posts().at(-1)!.body;
    expect(() => lightingSpecSchema.parse(body)).not.toThrow();
    expect(body.lights["2"]).toBeNull();
    expect(body.identity).toBeUndefined();
  });

  it("turning a light off and back on returns to the stored input set", async () => {
    const service = new FakeService();
    const { mixer, frames } = await bootMixer(service);
    mixer.toggleLight(2);
    await vi.waitFor(() => expect(frames.length).toBe(2));
    mixer.toggleLight(2);
    await vi.waitFor(() => expect(frames.length).toBe(3));
    expect(frames[1]).not.toBe("room.input");
    expect(frames[2]).toBe("room.input"); // unchanged panel short-circuits to identity
  });

  it("identical edits map to the identical frame set", async () => {
    const service = new FakeService();
    const { mixer, frames } = await bootMixer(service);
    mixer.toggleLight(3);
    await vi.waitFor(() => expect(frames.length).toBe(2));
    mixer.toggleLight(3);
    await vi.waitFor(() => expect(frames.length).toBe(3));
    mixer.toggleLight(3);
    await vi.waitFor(() => expect(frames.length).toBe(4));
    expect(frames[3]).toBe(frames[1]);
  });

  it("never renders a superseded response, even when it lands last", async () => {
    const service = new FakeService();
    const { mixer, frames } = await bootMixer(service);
    service.manual = true;
    mixer.toggleLight(2); // request A
    await vi.waitFor(() => expect(service.parked.length).toBe(1));
    mixer.toggleLight(3); // request B supersedes A
    await vi.waitFor(() => expect(service.parked.length).toBe(2));
    const [answerA, answerB] = service.parked;
    answerB("room.set-b");
    await vi.waitFor(() => expect(frames).toContain("room.set-b"));
    answerA("room.set-a"); // slow response for the stale edit
    await new Promise((r) => setTimeout(r, 10));
    expect(frames).not.toContain("room.set-a");
    expect(frames.at(-1)).toBe("room.set-b");
    expect(mixer.state.lastFrameSet).toBe("room.set-b");
  });

  it("blocks malformed colors client-side without touching the network", async () => {
    const service = new FakeService();
    const { mixer, errors } = await bootMixer(service);
    const before = service.posts().length;
    expect(mixer.setColorHex(1, "#zzzzzz")).toBe(false);
    expect(mixer.setColorHex(1, "12345")).toBe(false);
    expect(service.posts().length).toBe(before);
    expect(errors.length).toBe(2);
  });

  it("blocks the all-off panel client-side", async () => {
    const service = new FakeService();
    const { mixer, errors } = await bootMixer(service);
    const before = service.posts().length;
    mixer.setSun(0);
    mixer.toggleLight(1);
    mixer.toggleLight(2);
    await vi.waitFor(() => expect(errors.length).toBeGreaterThan(0));
    expect(errors.join(" ")).toContain("at least one light must be on");
    const bodies = service.posts().slice(before).map((p) => p.body);
    for (const body of bodies) {
      // anything that did go out while lights remained must be valid
      expect(() => lightingSpecSchema.parse(body)).not.toThrow();
    }
  });

  it("surfaces service rejections as readable errors", async () => {
    const service = new FakeService();
    const { mixer, errors } = await bootMixer(service);
    service.fail = { status: 404, error: "no distilled field" };
    mixer.toggleLight(2);
    await vi.waitFor(() => expect(errors.length).toBe(1));
    expect(errors[0]).toContain("404");
    expect(errors[0]).toContain("no distilled field");
  });
});

describe("Mixer slider debouncing", () => {
  beforeEach(() => vi.useFakeTimers());
  afterEach(() => vi.useRealTimers());

  it("a slider drag collapses to one POST carrying the final value", async () => {
    const service = new FakeService();
    const boot = bootMixer(service);
    await vi.runAllTimersAsync();
    const { mixer } = await boot;
    const before = service.posts().length;
    for (const v of [0.5, 0.7, 0.9, 1.1]) {
      mixer.setSun(v);
      await vi.advanceTimersByTimeAsync(50);
    }
    expect(service.posts().length).toBe(before);
    await vi.advanceTimersByTimeAsync(200);
    expect(service.posts().length).toBe(before + 1);
    expect(service.posts().at(-1)!.body.sun).toBeCloseTo(1.1, 12);
  });

  it("exposure shares the same trailing-edge path", async () => {
    const service = new FakeService();
    const boot = bootMixer(service);
    await vi.runAllTimersAsync();
    const { mixer } = await boot;
    const before = service.posts().length;
    mixer.setExposure(60);
    mixer.setExposure(72.5);
    await vi.advanceTimersByTimeAsync(199);
    expect(service.posts().length).toBe(before);
    await vi.advanceTimersByTimeAsync(1);
    expect(service.posts().length).toBe(before + 1);
    expect(service.posts().at(-1)!.body.exposure).toBeCloseTo(72.5, 12);
  });
});

import type { LightingSpec } from "./state.js";

export interface LightInfo {
  id: number;
  kind: string;
  color: [number, number, number] | null;
}

export interface ScenePanel {
  lights: LightInfo[];
  sun: number;
  exposure: number;
}

export interface RelightResult {
  frame_set: string;
  num_frames: number;
}

export class ApiError extends Error {
  constructor(
    readonly status: number,
    message: string,
  ) {
    super(message);
  }
}

async function asJson(res: Response): Promise<any> {
  if (!res.ok) {
    let detail = res.statusText;
    try {
      const body = await res.json();
      detail = body?.detail?.error ?? JSON.stringify(body?.detail ?? body);
    } catch {
      // non-JSON error body; keep the status text
    }
    throw new ApiError(res.status, detail);
  }
  return res.json();
}

/** Thin typed wrapper over the relighting service. */
export class MixerApi {
  constructor(
    private base: string,
    private fetchFn: typeof fetch = fetch,
  ) {}

  async listScenes(): Promise<string[]> {
    const doc = await asJson(await this.fetchFn(`${this.base}/scenes`));
    return doc.scenes;
  }

  async getLights(sceneId: string): Promise<ScenePanel> {
    return asJson(await this.fetchFn(`${this.base}/scenes/${sceneId}/lights`));
  }

  async relight(sceneId: string, spec: LightingSpec, signal?: AbortSignal): Promise<RelightResult> {
    const res = await this.fetchFn(`${this.base}/scenes/${sceneId}/relight`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(spec),
      signal,
    });
    return asJson(res);
  }

  frameUrl(frameSet: string, index: number): string {
    return `${this.base}/frames/${frameSet}/${index}.png`;
  }

  novelViewUrl(sceneId: string, lighting: string, yaw: number, pitch: number, radius: number | null): string {
    const params = new URLSearchParams({
      lighting,
      yaw: yaw.toFixed(2),
      pitch: pitch.toFixed(2),
    });
    if (radius !== null) params.set("radius", radius.toFixed(3));
    return `${this.base}/scenes/${sceneId}/novel-view?${params}`;
  }
}

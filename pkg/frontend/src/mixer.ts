import { MixerApi, ApiError, type ScenePanel } from "./api.js";
import { LatestWins, debounce } from "./inflight.js";
import {
  initialState,
  toLightingSpec,
  validateState,
  hexToLinear,
  type MixerState,
  type LightingSpec,
} from "./state.js";

export interface MixerEvents {
  /** Panel or pending flag changed; re-render controls. */
  onState: (state: MixerState) => void;
  /** A relight was acknowledged; show these frames. */
  onFrames: (frameSet: string, numFrames: number) => void;
  /** The orbit viewport should load this URL. */
  onOrbitFrame: (url: string) => void;
  /** Non-blocking problem report (validation or HTTP). */
  onError: (message: string) => void;
}

/**
 * Headless mixer controller: owns MixerState, talks to the service, and
 * enforces the sequencing rules. The DOM layer is a thin skin over this so
 * the behavior is testable with a mocked fetch.
 */
export class Mixer {
  readonly state: MixerState;
  private relightGate = new LatestWins<{ frame_set: string; num_frames: number }>();
  private baseline: string | null = null;
  private applySoon: () => void;

  constructor(
    private api: MixerApi,
    sceneId: string,
    private events: MixerEvents,
    debounceMs = 200,
  ) {
    this.state = initialState(sceneId);
    // sliders fire continuously while dragging; only the resting value
    // should reach the service
    this.applySoon = debounce(() => void this.applyLighting(), debounceMs);
  }

  async load(): Promise<void> {
    try {
      const panel: ScenePanel = await this.api.getLights(this.state.sceneId);
      this.state.lights = panel.lights.map((l) => ({
        id: l.id,
        kind: l.kind,
        on: l.color !== null,
        color: l.color ?? [1, 1, 1],
      }));
      this.state.sun = panel.sun;
      this.state.exposure = panel.exposure;
      this.baseline = JSON.stringify(toLightingSpec(this.state));
      this.events.onState(this.state);
      await this.applyLighting();
    } catch (err) {
      this.report(err);
    }
  }

  toggleLight(id: number): void {
    const row = this.state.lights.find((l) => l.id === id);
    if (!row) return;
    row.on = !row.on;
    this.events.onState(this.state);
    void this.applyLighting();
  }

  /** Returns false (and posts nothing) when the hex string is malformed. */
  setColorHex(id: number, hex: string): boolean {
    const row = this.state.lights.find((l) => l.id === id);
    const linear = hexToLinear(hex);
    if (!row || !linear) {
      this.events.onError(`"${hex}" is not a #rrggbb color`);
      return false;
    }
    row.color = linear;
    row.on = true;
    this.events.onState(this.state);
    void this.applyLighting();
    return true;
  }

  setSun(value: number): void {
    this.state.sun = value;
    this.events.onState(this.state);
    this.applySoon();
  }

  setExposure(value: number): void {
    this.state.exposure = value;
    this.events.onState(this.state);
    this.applySoon();
  }

  /**
   * Serialize and POST the current panel. An unchanged panel is sent as an
   * identity request so the server can hand back the stored input frames.
   */
  async applyLighting(): Promise<void> {
    const problems = validateState(this.state);
    if (problems.length) {
      this.events.onError(problems.join("; "));
      return;
    }
    const spec = toLightingSpec(this.state);
    const body: LightingSpec =
      JSON.stringify(spec) === this.baseline
        ? { lights: {}, sun: 0, exposure: 1, identity: true }
        : spec;
    this.state.pending = true;
    this.events.onState(this.state);
    await this.relightGate.dispatch(
      this.api.relight(this.state.sceneId, body),
      (result) => {
        this.state.lastFrameSet = result.frame_set;
        this.state.pending = false;
        this.events.onState(this.state);
        this.events.onFrames(result.frame_set, result.num_frames);
      },
      (err) => {
        this.state.pending = false;
        this.events.onState(this.state);
        this.report(err);
      },
    );
  }

  /** Viewport drag; needs a distilled field for the current frame set. */
  orbit(yaw: number, pitch: number, radius: number | null = null): void {
    this.state.orbit = { yaw, pitch, radius };
    if (!this.state.lastFrameSet) return;
    // the <img> swap makes the browser drop the previous in-flight load,
    // so last-set-wins covers orbit cancellation
    this.events.onOrbitFrame(
      this.api.novelViewUrl(this.state.sceneId, this.state.lastFrameSet, yaw, pitch, radius),
    );
  }

  private report(err: unknown): void {
    if (err instanceof ApiError) {
      this.events.onError(`service: ${err.status} ${err.message}`);
    } else {
      this.events.onError(`offline or unreachable: ${String(err)}`);
    }
  }
}

import { z } from "zod";

/** One mixer panel row. `color` is linear-light RGB in [0,1]^3. */
export interface LightRow {
  id: number;
  kind: string;
  on: boolean;
  color: [number, number, number];
}

export interface Orbit {
  yaw: number;
  pitch: number;
  radius: number | null; // null = server default
}

/** Client mirror of the server's lighting state plus presentation bits. */
export interface MixerState {
  sceneId: string;
  lights: LightRow[];
  sun: number;
  exposure: number;
  orbit: Orbit;
  lastFrameSet: string | null;
  pending: boolean;
}

/** Wire format accepted by POST /scenes/{id}/relight. */
export const lightingSpecSchema = z
  .object({
    lights: z.record(
      z.string().regex(/^[1-9][0-9]*$/),
      z.union([z.null(), z.tuple([zUnit(), zUnit(), zUnit()])]),
    ),
    sun: z.number().min(0),
    exposure: z.number().positive(),
    identity: z.boolean().optional(),
  })
  .strict();

export type LightingSpec = z.infer<typeof lightingSpecSchema>;

function zUnit() {
  return z.number().min(0).max(1);
}

export function initialState(sceneId: string): MixerState {
  return {
    sceneId,
    lights: [],
    sun: 0,
    exposure: 1,
    orbit: { yaw: 0, pitch: 0, radius: null },
    lastFrameSet: null,
    pending: false,
  };
}

/**
 * Serialize the panel for the service. OFF lights map to null (explicit
 * "turn this off" edit); ON lights carry their linear color.
 */
export function toLightingSpec(state: MixerState): LightingSpec {
  const lights: LightingSpec["lights"] = {};
  for (const row of state.lights) {
    lights[String(row.id)] = row.on ? [...row.color] : null;
  }
  return { lights, sun: state.sun, exposure: state.exposure };
}

/**
 * Display-to-linear transfer (IEC 61966-2-1). Color inputs hand us sRGB
 * bytes; the service speaks linear radiance multipliers, so convert before
 * serializing and invert when initializing pickers from server state.
 */
export function srgbToLinear(c: number): number {
  return c <= 0.04045 ? c / 12.92 : Math.pow((c + 0.055) / 1.055, 2.4);
}

export function linearToSrgb(c: number): number {
  return c <= 0.0031308 ? c * 12.92 : 1.055 * Math.pow(c, 1 / 2.4) - 0.055;
}

export function hexToLinear(hex: string): [number, number, number] | null {
  const m = /^#?([0-9a-fA-F]{6})$/.exec(hex.trim());
  if (!m) return null;
  const v = parseInt(m[1], 16);
  const bytes = [(v >> 16) & 255, (v >> 8) & 255, v & 255];
  return bytes.map((b) => srgbToLinear(b / 255)) as [number, number, number];
}

export function linearToHex(rgb: [number, number, number]): string {
  const bytes = rgb.map((c) => {
    const s = Math.round(linearToSrgb(Math.min(1, Math.max(0, c))) * 255);
    return s.toString(16).padStart(2, "0");
  });
  return "#" + bytes.join("");
}

/** Reject out-of-range values before they ever reach the wire. */
export function validateState(state: MixerState): string[] {
  const problems: string[] = [];
  for (const row of state.lights) {
    if (row.color.some((c) => !Number.isFinite(c) || c < 0 || c > 1)) {
      problems.push(`light ${row.id}: color components must lie in [0, 1]`);
    }
  }
  if (!Number.isFinite(state.sun) || state.sun < 0) {
    problems.push("sun intensity must be >= 0");
  }
  if (!Number.isFinite(state.exposure) || state.exposure <= 0) {
    problems.push("exposure must be > 0");
  }
  if (state.lights.length > 0 && state.lights.every((l) => !l.on) && state.sun === 0) {
    problems.push("at least one light must be on");
  }
  return problems;
}

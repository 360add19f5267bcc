import { MixerApi } from "./api.js";
import { Mixer } from "./mixer.js";
import { linearToHex, type MixerState } from "./state.js";

const api = new MixerApi("");

function el<K extends keyof HTMLElementTagNameMap>(tag: K, cls?: string): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (cls) node.className = cls;
  return node;
}

function toast(message: string) {
  const box = document.querySelector("#toasts")!;
  const note = el("div", "toast");
  note.textContent = message;
  box.appendChild(note);
  setTimeout(() => note.remove(), 4000);
}

function renderPanel(mixer: Mixer, state: MixerState) {
  const panel = document.querySelector("#lights")!;
  panel.replaceChildren();
  for (const row of state.lights) {
    const line = el("div", "light-row");
    const toggle = el("input");
    toggle.type = "checkbox";
    toggle.checked = row.on;
    toggle.onchange = () => mixer.toggleLight(row.id);
    const picker = el("input");
    picker.type = "color";
    picker.value = linearToHex(row.color);
    picker.disabled = !row.on;
    picker.onchange = () => mixer.setColorHex(row.id, picker.value);
    const label = el("span");
    label.textContent = `${row.kind} ${row.id}`;
    line.append(toggle, picker, label);
    panel.appendChild(line);
  }
  const busy = document.querySelector<HTMLElement>("#busy")!;
  busy.style.visibility = state.pending ? "visible" : "hidden";
  document
    .querySelectorAll<HTMLInputElement>("#panel input")
    .forEach((input) => (input.disabled = input.disabled || state.pending));
}

function wireSlider(id: string, apply: (value: number) => void) {
  const slider = document.querySelector<HTMLInputElement>(id)!;
  slider.oninput = () => apply(Number(slider.value));
}

function wireViewport(mixer: Mixer) {
  const img = document.querySelector<HTMLImageElement>("#viewport")!;
  let drag: { x: number; y: number } | null = null;
  img.onpointerdown = (ev) => {
    drag = { x: ev.clientX, y: ev.clientY };
    img.setPointerCapture(ev.pointerId);
  };
  img.onpointermove = (ev) => {
    if (!drag) return;
    const { yaw, pitch, radius } = mixer.state.orbit;
    const nextPitch = Math.max(-85, Math.min(85, pitch + (ev.clientY - drag.y) * 0.4));
    drag = { x: ev.clientX, y: ev.clientY };
    mixer.orbit(yaw + (ev.clientX - drag.x) * 0.4, nextPitch, radius);
  };
  img.onpointerup = () => (drag = null);
}

async function boot() {
  const scenes = await api.listScenes();
  if (!scenes.length) {
    toast("the service has no scenes; run the pipeline first");
    return;
  }
  const scrubber = document.querySelector<HTMLInputElement>("#frame")!;
  const strip = document.querySelector<HTMLImageElement>("#strip")!;
  const mixer = new Mixer(api, scenes[0], {
    onState: (state) => renderPanel(mixer, state),
    onFrames: (frameSet, numFrames) => {
      scrubber.max = String(numFrames - 1);
      strip.src = api.frameUrl(frameSet, Number(scrubber.value));
    },
    onOrbitFrame: (url) => {
      document.querySelector<HTMLImageElement>("#viewport")!.src = url;
    },
    onError: toast,
  });
  scrubber.oninput = () => {
    if (mixer.state.lastFrameSet) {
      strip.src = api.frameUrl(mixer.state.lastFrameSet, Number(scrubber.value));
    }
  };
  wireSlider("#sun", (v) => mixer.setSun(v));
  wireSlider("#exposure", (v) => mixer.setExposure(v));
  wireViewport(mixer);
  await mixer.load();
}

boot().catch((err) => toast(String(err)));

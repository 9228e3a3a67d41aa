/**
 * Page wiring: binds the store to the DOM, paints frames from the
 * display queue on the animation loop, and draws two small sparklines
 * from the telemetry series. No framework, no styling beyond layout.
 */

import { SessionClient } from "./client";
import { AUDIO_SOURCES, AudioSource, EnvelopePump } from "./dial";
import { DecodedFrame } from "./frames";
import { Label, LABELS, rgbaFromGray } from "./protocol";
import { ConsoleStore } from "./state";

const FRAME_SCALE = 8;

function byId<T extends HTMLElement>(id: string): T {
  const el = document.getElementById(id);
  if (el === null) throw new Error(`missing element #${id}`);
  return el as T;
}

function drawSparkline(canvas: HTMLCanvasElement, values: number[], color: string): void {
  const ctx = canvas.getContext("2d");
  if (ctx === null) return;
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  if (values.length < 2) return;
  const tail = values.slice(-120);
  const max = Math.max(...tail, 1e-9);
  ctx.strokeStyle = color;
  ctx.beginPath();
  for (let i = 0; i < tail.length; i++) {
    const x = (i / (tail.length - 1)) * (canvas.width - 2) + 1;
    const y = canvas.height - 1 - (tail[i] / max) * (canvas.height - 2);
    if (i === 0) ctx.moveTo(x, y);
    else ctx.lineTo(x, y);
  }
  ctx.stroke();
}

class ConsoleApp {
  private store = new ConsoleStore();
  private client: SessionClient | null = null;
  private pump: EnvelopePump | null = null;
  private lastUrl = "";

  private offscreen = document.createElement("canvas");
  private canvas = byId<HTMLCanvasElement>("frame-canvas");
  private statusEl = byId<HTMLSpanElement>("status");
  private bannerEl = byId<HTMLDivElement>("banner");
  private bannerText = byId<HTMLSpanElement>("banner-text");
  private urlInput = byId<HTMLInputElement>("url");
  private connectBtn = byId<HTMLButtonElement>("connect");
  private stopBtn = byId<HTMLButtonElement>("stop");
  private stateButtons = new Map<Label, HTMLButtonElement>();
  private exprSlider = byId<HTMLInputElement>("expression");
  private exprValue = byId<HTMLSpanElement>("expression-value");
  private dialSlider = byId<HTMLInputElement>("dial");
  private sourceSelect = byId<HTMLSelectElement>("audio-source");
  private downloadBtn = byId<HTMLButtonElement>("download");
  private statFps = byId<HTMLSpanElement>("stat-fps");
  private statFirst = byId<HTMLSpanElement>("stat-first-frame");
  private statStages = byId<HTMLSpanElement>("stat-stages");
  private statFrames = byId<HTMLSpanElement>("stat-frames");
  private fpsSpark = byId<HTMLCanvasElement>("spark-fps");
  private pipeSpark = byId<HTMLCanvasElement>("spark-pipe");

  constructor() {
    this.offscreen.width = 32;
    this.offscreen.height = 32;
    this.canvas.width = 32 * FRAME_SCALE;
    this.canvas.height = 32 * FRAME_SCALE;

    for (const label of LABELS) {
      const btn = byId<HTMLButtonElement>(`state-${label}`);
      btn.addEventListener("click", () => this.store.requestState(label));
      this.stateButtons.set(label, btn);
    }
    this.connectBtn.addEventListener("click", () => this.connect(this.urlInput.value));
    byId<HTMLButtonElement>("reconnect").addEventListener("click", () =>
      this.connect(this.lastUrl || this.urlInput.value),
    );
    this.stopBtn.addEventListener("click", () => this.client?.stop());
    this.exprSlider.addEventListener("input", () =>
      this.store.setExpression(parseFloat(this.exprSlider.value)),
    );
    this.dialSlider.addEventListener("input", () => {
      if (this.pump !== null) this.pump.level = parseFloat(this.dialSlider.value);
    });
    for (const source of AUDIO_SOURCES) {
      const opt = document.createElement("option");
      opt.value = source;
      opt.textContent = source;
      this.sourceSelect.appendChild(opt);
    }
    this.sourceSelect.addEventListener("change", () => {
      if (this.pump !== null) this.pump.source = this.sourceSelect.value as AudioSource;
    });
    this.downloadBtn.addEventListener("click", () => this.download());

    this.store.subscribe(() => this.render());
    this.render();
    requestAnimationFrame(() => this.paint());
  }

  private connect(url: string): void {
    if (this.store.connection === "open" || this.store.connection === "connecting") return;
    this.lastUrl = url;
    const store = (this.store = new ConsoleStore());
    store.subscribe(() => this.render());
    store.connecting();
    const client = new SessionClient(url, {
      onOpen: () => {
        client.start({ expression: parseFloat(this.exprSlider.value) });
        store.opened("idle", parseFloat(this.exprSlider.value));
        this.pump = new EnvelopePump((env) => client.sendAudio(env));
        this.pump.level = parseFloat(this.dialSlider.value);
        this.pump.source = this.sourceSelect.value as AudioSource;
        this.pump.start();
      },
      onFrame: (msg) => store.onFrame(msg),
      onTelemetry: (msg, raw) => store.onTelemetry(msg, raw),
      onStateAck: (msg) => store.onStateAck(msg),
      onServerError: (msg) => store.onServerError(msg),
      onClose: () => {
        this.pump?.stop();
        this.pump = null;
        store.closed("session ended");
      },
    });
    this.client = client;
    store.attach(client);
  }

  private download(): void {
    const text = this.store.exportTelemetryJsonl();
    const blob = new Blob([text], { type: "application/jsonl" });
    const a = document.createElement("a");
    a.href = URL.createObjectURL(blob);
    a.download = `telemetry-${this.store.sessionId ?? "session"}.jsonl`;
    a.click();
    URL.revokeObjectURL(a.href);
  }

  private paint(): void {
    const frame = this.store.nextFrame();
    if (frame !== null) this.draw(frame);
    requestAnimationFrame(() => this.paint());
  }

  private draw(frame: DecodedFrame): void {
    const octx = this.offscreen.getContext("2d");
    const ctx = this.canvas.getContext("2d");
    if (octx === null || ctx === null) return;
    const image = new ImageData(rgbaFromGray(frame.pixels), frame.width, frame.height);
    octx.putImageData(image, 0, 0);
    ctx.imageSmoothingEnabled = false;
    ctx.drawImage(this.offscreen, 0, 0, this.canvas.width, this.canvas.height);
  }

  private render(): void {
    const s = this.store;
    this.statusEl.textContent = s.connection;
    this.connectBtn.disabled = s.connection === "open" || s.connection === "connecting";
    this.stopBtn.disabled = s.connection !== "open";
    for (const [label, btn] of this.stateButtons) {
      btn.disabled = !s.canRequestState();
      // highlight follows the acked label, never the click
      btn.classList.toggle("active", s.label === label);
      btn.classList.toggle("pending", s.pendingLabel === label);
    }
    this.exprValue.textContent = s.expression.toFixed(2);
    this.statFrames.textContent = `${s.frameCount}`;
    this.statFirst.textContent =
      s.firstFrameMs === null ? "-" : `${s.firstFrameMs.toFixed(1)} ms`;
    const points = s.telemetry.points;
    if (points.length > 0) {
      const last = points[points.length - 1];
      this.statFps.textContent = `${last.fps.toFixed(1)}`;
      this.statStages.textContent =
        `feat ${last.audioFeatMs.toFixed(1)} / prep ${last.prepMs.toFixed(1)} / ` +
        `denoise ${last.denoiseMs.toFixed(1)} / decode ${last.decodeMs.toFixed(1)} ms`;
      drawSparkline(this.fpsSpark, points.map((p) => p.fps), "#2a7");
      drawSparkline(this.pipeSpark, points.map((p) => p.pipeMs), "#27a");
    }
    if (s.banner !== null) {
      const sum = s.banner.summary;
      this.bannerText.textContent =
        `${s.banner.message}: ${sum.chunks} chunks, ${sum.frames} frames, ` +
        `first frame ${sum.firstFrameMs?.toFixed(1) ?? "-"} ms, ` +
        `mean ${sum.meanFps?.toFixed(1) ?? "-"} fps, ${sum.violations} violations`;
      this.bannerEl.hidden = false;
    } else {
      this.bannerEl.hidden = true;
    }
  }
}

new ConsoleApp();

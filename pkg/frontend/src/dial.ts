/**
 * Audio sources for the session: a live envelope dial (slider acting
 * as loudness) and a few canned scripts. Either way the pump ships one
 * envelope per chunk period so the engine never starves or floods.
 */

import { realTimer, TimerApi } from "./timer";

export type AudioSource = "dial" | "silence" | "speechlike" | "pulse";

export const AUDIO_SOURCES: readonly AudioSource[] = [
  "dial",
  "silence",
  "speechlike",
  "pulse",
];

/** One chunk of scripted envelope; frame index g keeps phase across chunks. */
export function scriptedEnvelope(
  source: AudioSource,
  frames: number,
  startFrame: number,
  level = 0.8,
): number[] {
  const env = new Array<number>(frames);
  for (let i = 0; i < frames; i++) {
    const g = startFrame + i;
    switch (source) {
      case "silence":
        env[i] = 0;
        break;
      case "pulse":
        env[i] = g % 8 < 2 ? level : 0.05;
        break;
      case "speechlike": {
        const syllable = Math.abs(Math.sin(0.35 * g));
        const phrase = 0.55 + 0.45 * Math.sin(0.06 * g);
        env[i] = level * syllable * phrase;
        break;
      }
      case "dial":
        env[i] = level;
        break;
    }
  }
  return env;
}

export class EnvelopePump {
  level = 0;
  source: AudioSource = "dial";

  private handle: unknown = null;
  private sentFrames = 0;
  private timer: TimerApi;

  constructor(
    private send: (envelope: number[]) => void,
    private framesPerChunk: number = 12,
    private periodMs: number = 480,
    timer?: TimerApi,
  ) {
    this.timer = timer ?? realTimer;
  }

  get running(): boolean {
    return this.handle !== null;
  }

  start(): void {
    if (this.handle !== null) return;
    this.tick();
  }

  stop(): void {
    if (this.handle !== null) {
      this.timer.clear(this.handle);
      this.handle = null;
    }
  }

  private tick(): void {
    const env =
      this.source === "dial"
        ? new Array<number>(this.framesPerChunk).fill(this.level)
        : scriptedEnvelope(this.source, this.framesPerChunk, this.sentFrames);
    this.sentFrames += this.framesPerChunk;
    this.send(env);
    this.handle = this.timer.set(() => this.tick(), this.periodMs);
  }
}

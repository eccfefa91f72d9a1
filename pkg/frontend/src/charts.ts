// Assemble charts: parse CSV text, lay out geometry, draw, encode PNG.

import { parseBar, parseScatter, parseTimeseries } from "./csv.js";
import {
  Bar,
  DEFAULT_FRAME,
  Marker,
  PlotFrame,
  Series,
  Tick,
  layoutBars,
  layoutScatter,
  layoutTimeseries,
  unitTicks,
} from "./layout.js";
import { encodePng } from "./png.js";
import { BLACK, GREY, PALETTE, Raster, Color } from "./raster.js";
import { textWidth } from "./font.js";

export const KINDS = ["scatter", "bar", "timeseries"] as const;
export type Kind = (typeof KINDS)[number];

function frameBottom(frame: PlotFrame): number {
  return frame.top + frame.plotHeight;
}

function drawFrame(r: Raster, frame: PlotFrame, xLabel: string, yLabel: string, yTicks: Tick[]) {
  const bottom = frameBottom(frame);
  const right = frame.left + frame.plotWidth;
  r.line(frame.left, frame.top, frame.left, bottom, BLACK);
  r.line(frame.left, bottom, right, bottom, BLACK);
  for (const tick of yTicks) {
    r.line(frame.left - 4, tick.pos, frame.left, tick.pos, BLACK);
    r.line(frame.left, tick.pos, right, tick.pos, GREY);
    r.text(frame.left - 10 - textWidth(tick.label), tick.pos - 3, tick.label, BLACK);
  }
  r.text(frame.left, frame.top - 28, yLabel, BLACK, 2);
  r.text(
    frame.left + Math.floor((frame.plotWidth - textWidth(xLabel, 2)) / 2),
    bottom + 34,
    xLabel,
    BLACK,
    2
  );
}

function legend(r: Raster, frame: PlotFrame, entries: { label: string; color: Color }[]) {
  let y = frame.top + 6;
  const x = frame.left + frame.plotWidth - 220;
  for (const entry of entries) {
    r.fillRect(x, y, 10, 10, entry.color);
    r.text(x + 16, y + 1, entry.label.slice(0, 32), BLACK);
    y += 14;
  }
}

export function drawScatter(markers: Marker[], frame = DEFAULT_FRAME): Raster {
  const r = new Raster(frame.width, frame.height);
  drawFrame(r, frame, "performance (f_o)", "general fairness", unitTicks(frame));
  const bottom = frameBottom(frame);
  for (let i = 0; i <= 5; i++) {
    const x = Math.round(frame.left + (frame.plotWidth * i) / 5);
    r.line(x, bottom, x, bottom + 4, BLACK);
    const label = (i / 5).toFixed(1);
    r.text(x - Math.floor(textWidth(label) / 2), bottom + 8, label, BLACK);
  }
  const entries: { label: string; color: Color }[] = [];
  markers.forEach((marker, i) => {
    const color = PALETTE[i % PALETTE.length];
    r.fillCircle(marker.x, marker.y, 4, color);
    entries.push({ label: `${marker.strategy}/${marker.loss}`, color });
  });
  legend(r, frame, entries);
  return r;
}

export function drawBars(bars: Bar[], frame = DEFAULT_FRAME): Raster {
  const r = new Raster(frame.width, frame.height);
  drawFrame(r, frame, "fairness component", "mean over rounds", unitTicks(frame));
  const bottom = frameBottom(frame);
  const componentColor = new Map<string, Color>();
  for (const bar of bars) {
    if (!componentColor.has(bar.component)) {
      componentColor.set(bar.component, PALETTE[componentColor.size % PALETTE.length]);
    }
    const color = componentColor.get(bar.component)!;
    r.fillRect(bar.x, bar.yTop, bar.width, bar.height, color);
    // error bar: mean +/- std with caps, clipped to the unit axis
    const mid = bar.x + Math.floor(bar.width / 2);
    const hi = Math.max(frame.top, bar.yTop - Math.round(bar.std * frame.plotHeight));
    const lo = Math.min(bottom, bar.yTop + Math.round(bar.std * frame.plotHeight));
    r.line(mid, hi, mid, lo, BLACK);
    r.line(mid - 3, hi, mid + 3, hi, BLACK);
    r.line(mid - 3, lo, mid + 3, lo, BLACK);
    r.text(bar.x, bottom + 8, bar.component.slice(0, 4), BLACK);
  }
  legend(
    r,
    frame,
    [...componentColor.entries()].map(([label, color]) => ({ label, color }))
  );
  return r;
}

export function drawTimeseries(series: Series[], xTicks: Tick[], frame = DEFAULT_FRAME): Raster {
  const r = new Raster(frame.width, frame.height);
  drawFrame(r, frame, "round", "fairness", unitTicks(frame));
  const bottom = frameBottom(frame);
  const step = Math.max(1, Math.ceil(xTicks.length / 30));
  xTicks.forEach((tick, i) => {
    r.line(tick.pos, bottom, tick.pos, bottom + 4, BLACK);
    if (i % step === 0) {
      r.text(tick.pos - Math.floor(textWidth(tick.label) / 2), bottom + 8, tick.label, BLACK);
    }
  });
  const entries: { label: string; color: Color }[] = [];
  series.forEach((s, i) => {
    const color = PALETTE[i % PALETTE.length];
    for (let p = 1; p < s.points.length; p++) {
      r.line(s.points[p - 1].x, s.points[p - 1].y, s.points[p].x, s.points[p].y, color);
    }
    for (const point of s.points) {
      r.fillCircle(point.x, point.y, 2, color);
    }
    entries.push({ label: s.name, color });
  });
  legend(r, frame, entries.slice(0, 24));
  return r;
}

export function renderToPng(kind: Kind, csvTexts: string[], frame = DEFAULT_FRAME): Buffer {
  if (csvTexts.length === 0) {
    throw new Error("need at least one input CSV");
  }
  let raster: Raster;
  if (kind === "scatter") {
    const rows = csvTexts.flatMap(parseScatter);
    raster = drawScatter(layoutScatter(rows, frame), frame);
  } else if (kind === "bar") {
    const rows = csvTexts.flatMap(parseBar);
    raster = drawBars(layoutBars(rows, frame), frame);
  } else if (kind === "timeseries") {
    const rows = csvTexts.flatMap(parseTimeseries);
    const { series, xTicks } = layoutTimeseries(rows, frame);
    raster = drawTimeseries(series, xTicks, frame);
  } else {
    throw new Error(`unknown plot kind '${kind}'`);
  }
  return encodePng(raster.width, raster.height, raster.pixels);
}

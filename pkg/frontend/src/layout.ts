// Chart geometry as pure data: CSV rows in, positioned primitives out.
// Rendering draws whatever this module computed, so tests can check the
// numbers (bar values, marker counts, tick domains) without decoding
// pixels.

import { BarRow, ScatterRow, TimeseriesRow, TIMESERIES_COMPONENTS } from "./csv.js";

export interface PlotFrame {
  width: number;
  height: number;
  left: number;
  top: number;
  plotWidth: number;
  plotHeight: number;
}

export const DEFAULT_FRAME: PlotFrame = {
  width: 800,
  height: 600,
  left: 80,
  top: 50,
  plotWidth: 660,
  plotHeight: 480,
};

export interface Marker {
  cell: string;
  strategy: string;
  loss: string;
  fairness: number;
  performance: number;
  x: number;
  y: number;
}

export interface Bar {
  cell: string;
  component: string;
  value: number; // the CSV mean, untouched
  std: number;
  x: number;
  width: number;
  yTop: number;
  height: number;
}

export interface SeriesPoint {
  round: number;
  value: number;
  x: number;
  y: number;
}

export interface Series {
  name: string;
  cell: string;
  component: string;
  points: SeriesPoint[];
}

export interface Tick {
  pos: number;
  label: string;
}

function yToPixel(value: number, frame: PlotFrame): number {
  const clamped = Math.max(0, Math.min(1, value));
  return Math.round(frame.top + frame.plotHeight * (1 - clamped));
}

export function unitTicks(frame: PlotFrame): Tick[] {
  const ticks: Tick[] = [];
  for (let i = 0; i <= 5; i++) {
    const value = i / 5;
    ticks.push({ pos: yToPixel(value, frame), label: value.toFixed(1) });
  }
  return ticks;
}

export function layoutScatter(rows: ScatterRow[], frame = DEFAULT_FRAME): Marker[] {
  const ordered = [...rows].sort((a, b) => a.cell.localeCompare(b.cell));
  const markers: Marker[] = [];
  for (const row of ordered) {
    if (row.generalFairness === null || row.performance === null) continue;
    markers.push({
      cell: row.cell,
      strategy: row.strategy,
      loss: row.loss,
      fairness: row.generalFairness,
      performance: row.performance,
      x: Math.round(frame.left + frame.plotWidth * Math.max(0, Math.min(1, row.performance))),
      y: yToPixel(row.generalFairness, frame),
    });
  }
  return markers;
}

export function layoutBars(rows: BarRow[], frame = DEFAULT_FRAME): Bar[] {
  const cells: string[] = [];
  for (const row of rows) {
    if (!cells.includes(row.cell)) cells.push(row.cell);
  }
  const components: string[] = [];
  for (const row of rows) {
    if (!components.includes(row.component)) components.push(row.component);
  }
  const groupWidth = frame.plotWidth / Math.max(1, cells.length);
  const slot = groupWidth / (components.length + 1);
  const barWidth = Math.max(2, Math.floor(slot * 0.8));
  const bars: Bar[] = [];
  for (const row of rows) {
    if (row.mean === null) continue;
    const group = cells.indexOf(row.cell);
    const within = components.indexOf(row.component);
    const x = Math.round(
      frame.left + group * groupWidth + slot * (within + 0.5) + (slot - barWidth) / 2
    );
    const yTop = yToPixel(row.mean, frame);
    bars.push({
      cell: row.cell,
      component: row.component,
      value: row.mean,
      std: row.std ?? 0,
      x,
      width: barWidth,
      yTop,
      height: frame.top + frame.plotHeight - yTop,
    });
  }
  return bars;
}

export function roundDomain(rows: TimeseriesRow[]): number[] {
  const rounds = [...new Set(rows.map((row) => row.round))];
  rounds.sort((a, b) => a - b);
  return rounds;
}

export function layoutTimeseries(rows: TimeseriesRow[], frame = DEFAULT_FRAME): {
  series: Series[];
  xTicks: Tick[];
} {
  const rounds = roundDomain(rows);
  const span = Math.max(1, rounds[rounds.length - 1] - rounds[0]);
  const xOf = (round: number) =>
    Math.round(frame.left + (frame.plotWidth * (round - rounds[0])) / span);
  const names = new Map<string, Series>();
  const ordered = [...rows].sort((a, b) =>
    a.cell === b.cell ? a.round - b.round : a.cell.localeCompare(b.cell)
  );
  for (const row of ordered) {
    for (const component of TIMESERIES_COMPONENTS) {
      const value = row.values[component];
      if (value === null || Number.isNaN(value)) continue;
      const name = `${row.cell}:${component}`;
      let series = names.get(name);
      if (!series) {
        series = { name, cell: row.cell, component, points: [] };
        names.set(name, series);
      }
      series.points.push({ round: row.round, value, x: xOf(row.round), y: yToPixel(value, frame) });
    }
  }
  const xTicks: Tick[] = rounds.map((round) => ({ pos: xOf(round), label: String(round) }));
  return { series: [...names.values()].sort((a, b) => a.name.localeCompare(b.name)), xTicks };
}

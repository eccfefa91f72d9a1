// CSV parsing for the three benchmark plot-data schemas.
// Fields never contain quotes or embedded commas, so a plain split is exact.

export interface ScatterRow {
  cell: string;
  strategy: string;
  loss: string;
  generalFairness: number | null;
  performance: number | null;
}

export interface BarRow {
  cell: string;
  component: string;
  mean: number | null;
  std: number | null;
}

export interface TimeseriesRow {
  cell: string;
  round: number;
  values: Record<string, number | null>;
}

export const TIMESERIES_COMPONENTS = ["f_j", "f_g", "f_r", "f_o", "F_t"] as const;

const SCHEMAS: Record<string, string[]> = {
  scatter: ["cell", "strategy", "loss", "general_fairness", "performance"],
  "components-bar": ["cell", "component", "mean", "std"],
  "components-timeseries": ["cell", "round", ...TIMESERIES_COMPONENTS],
};

export function parseTable(text: string, kind: string): string[][] {
  const expected = SCHEMAS[kind];
  if (!expected) {
    throw new Error(`unknown plot kind '${kind}'`);
  }
  const lines = text.split("\n").filter((line) => line.trim().length > 0);
  if (lines.length === 0) {
    throw new Error("empty CSV input");
  }
  const header = lines[0].split(",");
  for (const column of expected) {
    if (!header.includes(column)) {
      throw new Error(`CSV is missing required column '${column}' for kind '${kind}'`);
    }
  }
  const index = expected.map((column) => header.indexOf(column));
  return lines.slice(1).map((line) => {
    const parts = line.split(",");
    return index.map((i) => parts[i] ?? "");
  });
}

function num(field: string): number | null {
  if (field === "") return null;
  const value = Number(field);
  if (Number.isNaN(value) && field !== "nan") {
    throw new Error(`not a number: '${field}'`);
  }
  return value;
}

export function parseScatter(text: string): ScatterRow[] {
  return parseTable(text, "scatter").map((row) => ({
    cell: row[0],
    strategy: row[1],
    loss: row[2],
    generalFairness: num(row[3]),
    performance: num(row[4]),
  }));
}

export function parseBar(text: string): BarRow[] {
  return parseTable(text, "components-bar").map((row) => ({
    cell: row[0],
    component: row[1],
    mean: num(row[2]),
    std: num(row[3]),
  }));
}

export function parseTimeseries(text: string): TimeseriesRow[] {
  return parseTable(text, "components-timeseries").map((row) => {
    const values: Record<string, number | null> = {};
    TIMESERIES_COMPONENTS.forEach((name, i) => {
      values[name] = num(row[2 + i]);
    });
    return { cell: row[0], round: Number(row[1]), values };
  });
}

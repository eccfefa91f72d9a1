#!/usr/bin/env node
// CLI: plot --kind <scatter|bar|timeseries> --in <csv...> --out <png>

import { readFileSync, writeFileSync } from "node:fs";
import { KINDS, Kind, renderToPng } from "./charts.js";

interface Args {
  kind: Kind;
  inputs: string[];
  out: string;
}

export function parseArgs(argv: string[]): Args {
  let kind: string | null = null;
  let out: string | null = null;
  const inputs: string[] = [];
  for (let i = 0; i < argv.length; i++) {
    const arg = argv[i];
    if (arg === "--kind") {
      kind = argv[++i];
    } else if (arg === "--out") {
      out = argv[++i];
    } else if (arg === "--in") {
      while (i + 1 < argv.length && !argv[i + 1].startsWith("--")) {
        inputs.push(argv[++i]);
      }
    } else {
      throw new Error(`unknown argument '${arg}'`);
    }
  }
  if (!kind || !(KINDS as readonly string[]).includes(kind)) {
    throw new Error(`--kind must be one of ${KINDS.join(", ")}`);
  }
  if (inputs.length === 0) throw new Error("--in needs at least one CSV path");
  if (!out) throw new Error("--out is required");
  return { kind: kind as Kind, inputs, out };
}

export function main(argv: string[]): number {
  let args: Args;
  try {
    args = parseArgs(argv);
  } catch (err) {
    console.error(String(err instanceof Error ? err.message : err));
    console.error("usage: plot --kind <scatter|bar|timeseries> --in <csv...> --out <png>");
    return 2;
  }
  try {
    const texts = args.inputs.map((path) => readFileSync(path, "utf-8"));
    writeFileSync(args.out, renderToPng(args.kind, texts));
    console.log(`wrote ${args.out}`);
    return 0;
  } catch (err) {
    console.error(String(err instanceof Error ? err.message : err));
    return 1;
  }
}

if (process.argv[1] && process.argv[1].endsWith("plot.js")) {
  process.exit(main(process.argv.slice(2)));
}

/** Client-side schedule form validation, mirroring the gateway's rules so
 * obvious mistakes never leave the browser. */

import type { ScheduleForm, ScheduleFormEntry } from "./types.js";

export const MAX_SCAN_DIMS = 4;

export interface FieldError {
  /** dotted path into the form, e.g. "entries.0.scan.dims" */
  field: string;
  message: string;
}

export function validateEntry(entry: ScheduleFormEntry, index: number): FieldError[] {
  const errors: FieldError[] = [];
  const base = `entries.${index}`;
  if (!entry.scriptName) {
    errors.push({ field: `${base}.scriptName`, message: "script is required" });
  }
  if (!Number.isInteger(entry.repeat) || entry.repeat < 1) {
    errors.push({ field: `${base}.repeat`, message: "repeat must be a positive integer" });
  }
  for (const name of Object.keys(entry.params)) {
    if (!(name in entry.paramSchema)) {
      errors.push({
        field: `${base}.params.${name}`,
        message: `unknown parameter "${name}"`,
      });
    }
  }
  for (const [name, schemaValue] of Object.entries(entry.paramSchema)) {
    const value = entry.params[name];
    if (value !== undefined && typeof value !== typeof schemaValue) {
      errors.push({
        field: `${base}.params.${name}`,
        message: `expected ${typeof schemaValue}`,
      });
    }
  }
  if (entry.scan) {
    if (entry.scan.dims.length < 1 || entry.scan.dims.length > MAX_SCAN_DIMS) {
      errors.push({
        field: `${base}.scan.dims`,
        message: `scans support 1-${MAX_SCAN_DIMS} dimensions`,
      });
    }
    entry.scan.dims.forEach((dim, j) => {
      if (!(dim.param in entry.paramSchema)) {
        errors.push({
          field: `${base}.scan.dims.${j}.param`,
          message: `"${dim.param}" is not a script parameter`,
        });
      }
      if (dim.values.length === 0) {
        errors.push({
          field: `${base}.scan.dims.${j}.values`,
          message: "dimension has no values",
        });
      }
    });
  }
  return errors;
}

export function validateSchedule(form: ScheduleForm): FieldError[] {
  if (form.entries.length === 0) {
    return [{ field: "entries", message: "schedule needs at least one entry" }];
  }
  return form.entries.flatMap((entry, i) => validateEntry(entry, i));
}

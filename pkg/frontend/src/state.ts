// Form state for one annotation: five criteria, all required before submit.
// The value domains come from the server at runtime (GET /api/domains), so
// the form can never drift from what the service accepts.

export interface CriterionDomain {
  values: number[];
  labels: Record<string, string>;
  worst: number;
}

export type DomainSchema = Record<string, CriterionDomain>;

// Keyboard layout: digits set readability directly; letters toggle the
// binary criteria, lowercase for the relaxed variant and uppercase for the
// strict one.  The first press marks the favourable answer, pressing the
// same key again flips it.
const KEY_TO_CRITERION: Record<string, string> = {
  c: "completeness_relaxed",
  C: "completeness_strict",
  x: "correctness_relaxed",
  X: "correctness_strict",
};

export interface KeyEffect {
  criterion: string;
  value: number;
}

export class AnnotationForm {
  private chosen = new Map<string, number>();

  constructor(readonly schema: DomainSchema) {
    if (Object.keys(schema).length === 0) {
      throw new Error("empty domain schema");
    }
  }

  criteria(): string[] {
    return Object.keys(this.schema);
  }

  get(criterion: string): number | undefined {
    return this.chosen.get(criterion);
  }

  set(criterion: string, value: number): void {
    const domain = this.schema[criterion];
    if (!domain) {
      throw new Error(`unknown criterion ${criterion}`);
    }
    if (!domain.values.includes(value)) {
      throw new Error(`value ${value} is not allowed for ${criterion}`);
    }
    this.chosen.set(criterion, value);
  }

  // unset -> the favourable (non-worst) value; set -> next value, cycling.
  toggle(criterion: string): number {
    const domain = this.schema[criterion];
    if (!domain) {
      throw new Error(`unknown criterion ${criterion}`);
    }
    const current = this.chosen.get(criterion);
    let next: number;
    if (current === undefined) {
      next = domain.values.find((v) => v !== domain.worst) ?? domain.values[0];
    } else {
      const at = domain.values.indexOf(current);
      next = domain.values[(at + 1) % domain.values.length];
    }
    this.chosen.set(criterion, next);
    return next;
  }

  // Returns what changed, or null when the key means nothing here.
  handleKey(key: string): KeyEffect | null {
    if (/^[0-9]$/.test(key)) {
      const domain = this.schema["readability"];
      const value = Number(key);
      if (domain && domain.values.includes(value)) {
        this.chosen.set("readability", value);
        return { criterion: "readability", value };
      }
      return null;
    }
    const criterion = KEY_TO_CRITERION[key];
    if (criterion && this.schema[criterion]) {
      return { criterion, value: this.toggle(criterion) };
    }
    return null;
  }

  // Criteria still unset, in schema order.
  missing(): string[] {
    return this.criteria().filter((c) => !this.chosen.has(c));
  }

  complete(): boolean {
    return this.missing().length === 0;
  }

  clear(): void {
    this.chosen.clear();
  }

  // The submission body values; throws while any criterion is unset.
  payload(): Record<string, number> {
    const missing = this.missing();
    if (missing.length > 0) {
      throw new Error(`not submittable, missing: ${missing.join(", ")}`);
    }
    const out: Record<string, number> = {};
    for (const criterion of this.criteria()) {
      out[criterion] = this.chosen.get(criterion)!;
    }
    return out;
  }
}

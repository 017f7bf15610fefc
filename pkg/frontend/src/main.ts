// DOM layer: sign-in, the rating form, and the completion screen.
// All state lives on the server; the client holds only the annotator token
// and the form being filled.  Configuration identity never reaches the DOM:
// the server's sample payload has no config fields and the sample id stays
// in module scope.

import { AnnotationApi, ApiError, NextResponse } from "./api.js";
import { AnnotationForm, DomainSchema } from "./state.js";

export interface TokenStore {
  get(): string | null;
  set(value: string): void;
}

export interface UiHandle {
  root: HTMLElement;
  // Resolves when every queued action so far has finished.
  idle(): Promise<void>;
}

export function mountApp(
  root: HTMLElement,
  api: AnnotationApi,
  store: TokenStore
): UiHandle {
  const doc = root.ownerDocument;
  let token = "";
  let schema: DomainSchema | null = null;
  let form: AnnotationForm | null = null;
  let sampleId = "";
  let busy = false;
  let pending: Promise<void> = Promise.resolve();

  // Serialize async actions; at most one request chain runs at a time.
  function enqueue(action: () => Promise<void>): void {
    pending = pending.then(action).catch((error) => {
      showServerError(error instanceof Error ? error.message : String(error));
      busy = false;
    });
  }

  function el<K extends keyof HTMLElementTagNameMap>(
    tag: K,
    id: string,
    parent: HTMLElement,
    text = ""
  ): HTMLElementTagNameMap[K] {
    const node = doc.createElement(tag);
    if (id) node.id = id;
    if (text) node.textContent = text;
    parent.appendChild(node);
    return node;
  }

  // -- static skeleton --------------------------------------------------------

  root.textContent = "";
  const signinView = el("div", "signin-view", root);
  el("h1", "", signinView, "Annotation");
  el("p", "", signinView, "Enter your annotator token to begin.");
  const tokenInput = el("input", "token-input", signinView);
  tokenInput.type = "password";
  tokenInput.value = store.get() ?? "";
  const signinBtn = el("button", "signin-btn", signinView, "Sign in");
  const signinError = el("p", "signin-error", signinView);
  signinError.className = "error";

  const annotateView = el("div", "annotate-view", root);
  const progressLine = el("p", "progress", annotateView);
  el("h2", "term-label", annotateView, "Term");
  const termText = el("p", "term", annotateView);
  termText.className = "term";
  el("h2", "output-label", annotateView, "Generated text");
  const outputText = el("p", "output", annotateView);
  outputText.className = "output";
  const criteriaBox = el("div", "criteria", annotateView);
  const blockedLine = el("p", "blocked", annotateView);
  blockedLine.className = "error";
  const serverError = el("p", "server-error", annotateView);
  serverError.className = "error";
  const submitBtn = el("button", "submit-btn", annotateView, "Submit (Enter)");
  el(
    "p",
    "keys-help",
    annotateView,
    "Keys: 1/2/3 readability, c/C completeness (relaxed/strict), " +
      "x/X correctness (relaxed/strict); a second press flips yes/no."
  );

  const doneView = el("div", "done-view", root);
  el("h1", "", doneView, "All done");
  const doneCount = el("p", "done-count", doneView);

  const agreementFooter = el("p", "agreement-footer", root);
  agreementFooter.className = "footer";

  function show(view: "signin" | "annotate" | "done"): void {
    signinView.style.display = view === "signin" ? "" : "none";
    annotateView.style.display = view === "annotate" ? "" : "none";
    doneView.style.display = view === "done" ? "" : "none";
  }
  show("signin");

  // -- rendering --------------------------------------------------------------

  function showServerError(message: string): void {
    serverError.textContent = message;
  }

  function renderCriteria(): void {
    if (!schema || !form) return;
    criteriaBox.textContent = "";
    for (const criterion of form.criteria()) {
      const domain = schema[criterion];
      const row = doc.createElement("div");
      row.className = "criterion-row";
      row.dataset.criterion = criterion;
      const label = doc.createElement("span");
      label.className = "criterion-name";
      label.textContent = criterion.replace(/_/g, " ");
      row.appendChild(label);
      for (const value of domain.values) {
        const button = doc.createElement("button");
        button.dataset.value = String(value);
        button.textContent = `${value} ${domain.labels[String(value)] ?? ""}`.trim();
        if (form.get(criterion) === value) {
          button.className = "selected";
        }
        button.addEventListener("click", () => {
          if (busy || !form) return;
          form.set(criterion, value);
          blockedLine.textContent = "";
          renderCriteria();
        });
        row.appendChild(button);
      }
      criteriaBox.appendChild(row);
    }
  }

  function renderAgreement(rows: { criterion: string; alpha: number }[]): void {
    if (rows.length === 0) {
      agreementFooter.textContent = "agreement: waiting for overlapping ratings";
      return;
    }
    agreementFooter.textContent =
      "agreement: " +
      rows.map((r) => `${r.criterion} alpha=${r.alpha.toFixed(2)}`).join(", ");
  }

  function renderNext(response: NextResponse): void {
    const progress = response.progress;
    if (response.done || response.sample === null) {
      doneCount.textContent =
        `You rated ${progress.completed} of ${progress.total} samples. ` +
        "Thank you!";
      show("done");
      return;
    }
    sampleId = response.sample.sample_id;
    termText.textContent = response.sample.term;
    outputText.textContent = response.sample.output_text;
    progressLine.textContent = `Progress: ${progress.completed} / ${progress.total}`;
    form = new AnnotationForm(schema!);
    blockedLine.textContent = "";
    serverError.textContent = "";
    renderCriteria();
    show("annotate");
  }

  async function refreshAgreement(): Promise<void> {
    renderAgreement((await api.stats()).agreement);
  }

  // -- actions ----------------------------------------------------------------

  function signIn(): void {
    const value = tokenInput.value.trim();
    if (!value) {
      signinError.textContent = "token must not be empty";
      return;
    }
    if (busy) return;
    busy = true;
    enqueue(async () => {
      try {
        if (!schema) {
          schema = await api.domains();
        }
        const response = await api.next(value);
        token = value;
        store.set(value);
        signinError.textContent = "";
        renderNext(response);
        await refreshAgreement();
      } catch (error) {
        if (error instanceof ApiError && error.status === 403) {
          signinError.textContent = error.detail;
        } else {
          throw error;
        }
      } finally {
        busy = false;
      }
    });
  }

  function submit(): void {
    if (busy || !form) return;
    if (!form.complete()) {
      const names = form.missing().map((c) => c.replace(/_/g, " "));
      blockedLine.textContent = `Set ${names.join(", ")} before submitting.`;
      return;
    }
    const values = form.payload();
    const submittedFor = sampleId;
    busy = true;
    submitBtn.disabled = true;
    enqueue(async () => {
      try {
        await api.submit(token, submittedFor, values);
        renderNext(await api.next(token));
        await refreshAgreement();
      } catch (error) {
        if (error instanceof ApiError) {
          // Server rejection: surface the offending field inline and keep
          // the form so the annotator can fix and resubmit.
          showServerError(error.detail);
        } else {
          throw error;
        }
      } finally {
        busy = false;
        submitBtn.disabled = false;
      }
    });
  }

  signinBtn.addEventListener("click", signIn);
  tokenInput.addEventListener("keydown", (event) => {
    if (event.key === "Enter") signIn();
  });
  submitBtn.addEventListener("click", submit);

  doc.addEventListener("keydown", (event) => {
    if (annotateView.style.display === "none" || busy || !form) return;
    const target = event.target as HTMLElement | null;
    if (target && target.tagName === "INPUT") return;
    if (event.key === "Enter") {
      submit();
      return;
    }
    if (form.handleKey(event.key)) {
      blockedLine.textContent = "";
      renderCriteria();
    }
  });

  return {
    root,
    idle: () => pending,
  };
}

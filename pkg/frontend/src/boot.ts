// Browser entry point: mount the app on #app with the real backend and the
// token remembered in localStorage (the only client-side persistence).

import { AnnotationApi } from "./api.js";
import { mountApp } from "./main.js";

const root = document.getElementById("app");
if (root) {
  mountApp(root, new AnnotationApi(""), {
    get: () => window.localStorage.getItem("annotator_token"),
    set: (value) => window.localStorage.setItem("annotator_token", value),
  });
}

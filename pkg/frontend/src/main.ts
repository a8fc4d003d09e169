import { ApiClient } from "./api.js";
import { App } from "./app.js";

const params = new URLSearchParams(window.location.search);
const token = params.get("token");
const author = params.get("author") ?? "reviewer";

const root = document.getElementById("root");
if (root) {
  const app = new App(root, new ApiClient("", token), author);
  void app.refreshWorklist();
  (window as unknown as { hemoloopApp: App }).hemoloopApp = app;
}

import { QaClient } from "./api.js";
import { createApp } from "./app.js";
import { DEFAULT_BASE_URL } from "./store.js";

const root = document.getElementById("app");
if (root === null) {
  throw new Error("missing #app mount point");
}
// createApp immediately overrides the base URL with the persisted one
createApp(root, new QaClient(DEFAULT_BASE_URL));

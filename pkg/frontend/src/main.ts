import { ApiClient } from "./api.js";
import { WorkbenchController } from "./controller.js";
import { mountWorkbench } from "./dom.js";

const params = new URLSearchParams(window.location.search);
const baseUrl = params.get("api") ?? "http://127.0.0.1:8000";
const annotatorId = params.get("annotator") ?? "anonymous";

const api = new ApiClient(baseUrl, annotatorId);
const controller = new WorkbenchController(api);
const root = document.getElementById("app");
if (!root) throw new Error("missing #app mount point");
mountWorkbench(root, controller, (id) => `${baseUrl}/images/${id}.png`);

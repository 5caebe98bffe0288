import { App } from "./app.js";
import { ServiceClient } from "./api.js";

const base = new URLSearchParams(location.search).get("api") ?? "";
const app = new App(new ServiceClient(base), document);
app.bind();

declare global {
  interface Window {
    latentfill: App;
  }
}
window.latentfill = app;

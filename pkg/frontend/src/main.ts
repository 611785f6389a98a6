import { ApiClient } from "./api.js";
import { ConsoleController } from "./controller.js";
import { Poller } from "./poller.js";
import { renderBanner, renderQueue, renderStatus } from "./render.js";
import { ConsoleStore } from "./state.js";

const api = new ApiClient();
const store = new ConsoleStore();
const controller = new ConsoleController(api, store);

const statusHost = document.getElementById("status")!;
const bannerHost = document.getElementById("banner")!;
const queueHost = document.getElementById("queue")!;

store.subscribe((state) => {
  renderStatus(state, statusHost);
  renderBanner(state, bannerHost);
  renderQueue(state, queueHost, controller);
});

new Poller(api, store).start();

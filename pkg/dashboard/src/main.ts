import { GatewayApi } from "./api.js";
import { startFleetView, wireDeployPanel, wireSubmitPanel, wireWatchPanel } from "./app.js";

// Served from the gateway itself, so all requests are same-origin.
const api = new GatewayApi(location.origin);

startFleetView(api);
wireDeployPanel(api);
wireSubmitPanel(api);
wireWatchPanel(api);

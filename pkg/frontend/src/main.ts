/** Entry point: wire the API client, store, view and key bindings. */

import { ApiClient } from "./api.js";
import { bindKeyboard } from "./keyboard.js";
import { TriageView } from "./render.js";
import { TriageStore } from "./state.js";

const api = new ApiClient("");
const store = new TriageStore(api);
new TriageView(store);
bindKeyboard(store);
void store.init();

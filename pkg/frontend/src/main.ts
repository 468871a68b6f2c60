/** DOM wiring: login, item rendering, choice buttons, retry on failure. */

import { Outcome, StudyApi } from "./api";
import { renderItemHeader, renderPanel } from "./render";
import { SessionState } from "./state";

const OUTCOME_BUTTONS: { outcome: Outcome; label: string }[] = [
  { outcome: "A", label: "Left is better" },
  { outcome: "B", label: "Right is better" },
  { outcome: "equally_good", label: "Equally good" },
  { outcome: "equally_bad", label: "Equally bad" },
];

function el(id: string): HTMLElement {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node;
}

function showError(message: string, retry: () => void): void {
  const box = el("error");
  box.innerHTML = "";
  box.appendChild(document.createTextNode(message + " "));
  const btn = document.createElement("button");
  btn.textContent = "Retry";
  btn.onclick = () => {
    box.textContent = "";
    retry();
  };
  box.appendChild(btn);
}

function renderCurrent(state: SessionState): void {
  const item = state.current();
  const stage = el("stage");
  if (item === null) {
    stage.innerHTML =
      "<h2>All done</h2><p>Thank you! Your 18 judgments were recorded.</p>";
    return;
  }
  const { position, total } = state.progress();
  stage.innerHTML =
    renderItemHeader(item, position, total) +
    `<div class="panels">` +
    `<div class="panel">${renderPanel(item, item.selected_a)}</div>` +
    `<div class="panel">${renderPanel(item, item.selected_b)}</div>` +
    `</div><div id="buttons"></div>`;
  const buttons = el("buttons");
  for (const { outcome, label } of OUTCOME_BUTTONS) {
    const btn = document.createElement("button");
    btn.textContent = label;
    btn.onclick = () => {
      void submit(state, outcome);
    };
    buttons.appendChild(btn);
  }
}

async function submit(state: SessionState, outcome: Outcome): Promise<void> {
  try {
    const advanced = await state.submit(outcome);
    if (advanced) renderCurrent(state);
  } catch {
    showError("Could not record the choice.", () => {
      void submit(state, outcome);
    });
  }
}

async function start(api: StudyApi, user: string): Promise<void> {
  try {
    const session = await api.fetchSession(user);
    renderCurrent(new SessionState(api, session));
  } catch {
    showError("Could not load the session.", () => {
      void start(api, user);
    });
  }
}

export function init(): void {
  const api = new StudyApi((url, init) => fetch(url, init));
  el("login-button").onclick = () => {
    const user = (el("username") as HTMLInputElement).value.trim();
    if (!user) return;
    el("login").style.display = "none";
    void start(api, user);
  };
}

if (typeof document !== "undefined" && document.getElementById("login")) {
  init();
}

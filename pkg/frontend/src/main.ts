/** Reader workstation wiring: fetch the next blinded image, collect three
 * ordinal scores plus one nodule polygon (or "no nodule"), submit, repeat.
 * The page shows nothing about an image beyond its opaque id and the
 * session progress. */

import { ApiError, StudyClient } from "./api.js";
import {
  SCORE_BOUNDS,
  SCORE_ORDER,
  ScoreName,
  ViewState,
  assignDigit,
  buildPayload,
  canSubmit,
  freshState,
  setScore,
} from "./state.js";
import { Viewer } from "./viewer.js";

function mustGet<T extends HTMLElement>(id: string): T {
  const el = document.getElementById(id);
  if (!el) throw new Error(`missing element #${id}`);
  return el as T;
}

const canvas = mustGet<HTMLCanvasElement>("image-canvas");
const itemLabel = mustGet<HTMLElement>("item-label");
const progressLabel = mustGet<HTMLElement>("progress-label");
const statusLine = mustGet<HTMLElement>("status-line");
const submitButton = mustGet<HTMLButtonElement>("submit-button");
const retryButton = mustGet<HTMLButtonElement>("retry-button");
const clearButton = mustGet<HTMLButtonElement>("clear-polygon");
const noNodule = mustGet<HTMLInputElement>("no-nodule");
const doneScreen = mustGet<HTMLElement>("done-screen");
const workArea = mustGet<HTMLElement>("work-area");

const params = new URLSearchParams(window.location.search);
const token = params.get("token") ?? window.localStorage.getItem("session_token") ?? "";
if (token) window.localStorage.setItem("session_token", token);
const client = new StudyClient("", token);

const viewer = new Viewer(canvas);
let state: ViewState = freshState();

function scoreButtons(name: ScoreName): HTMLButtonElement[] {
  return Array.from(
    document.querySelectorAll<HTMLButtonElement>(`button[data-score="${name}"]`));
}

function refreshControls(): void {
  for (const name of SCORE_ORDER) {
    for (const button of scoreButtons(name)) {
      const value = Number(button.dataset.value);
      button.classList.toggle("selected", state.scores[name] === value);
    }
  }
  noNodule.checked = state.noNodule;
  submitButton.disabled = !canSubmit(state);
}

function setStatus(text: string, isError = false): void {
  statusLine.textContent = text;
  statusLine.classList.toggle("error", isError);
}

async function loadNext(): Promise<void> {
  retryButton.hidden = true;
  setStatus("loading next image...");
  let response;
  try {
    response = await client.next();
  } catch (err) {
    setStatus(`could not reach the study service (${err})`, true);
    retryButton.hidden = false;
    return;
  }
  if (response.done || !response.item_id || !response.image) {
    workArea.hidden = true;
    doneScreen.hidden = false;
    setStatus("session complete");
    return;
  }
  const image = new Image();
  image.onload = () => {
    viewer.setImage(image);
    state = freshState(response.item_id);
    itemLabel.textContent = response.item_id;
    refreshControls();
    setStatus("rate the image and segment a suspect nodule (or mark none)");
  };
  image.onerror = () => {
    setStatus("image failed to decode", true);
    retryButton.hidden = false; // never silently skip an item
  };
  image.src = `data:image/png;base64,${response.image}`;
  await refreshProgress();
}

async function refreshProgress(): Promise<void> {
  try {
    const p = await client.progress();
    progressLabel.textContent = `${p.done} / ${p.total}`;
  } catch {
    progressLabel.textContent = "-";
  }
}

async function submit(): Promise<void> {
  state.polygon = viewer.polygon;
  state.polygonClosed = viewer.polygonClosed;
  if (!canSubmit(state)) {
    setStatus(state.noNodule || viewer.polygonClosed
      ? "select all three scores before submitting"
      : "close the polygon (click its first vertex) or mark 'no nodule'", true);
    return;
  }
  const { width, height } = viewer.imageSize;
  submitButton.disabled = true;
  try {
    await client.submit(buildPayload(state, width, height));
  } catch (err) {
    if (err instanceof ApiError && err.status === 409) {
      setStatus("already annotated elsewhere; moving on");
    } else {
      setStatus(`submit failed: ${err}`, true);
      submitButton.disabled = false;
      return;
    }
  }
  await loadNext();
}

for (const name of SCORE_ORDER) {
  for (const button of scoreButtons(name)) {
    button.addEventListener("click", () => {
      setScore(state, name, Number(button.dataset.value));
      refreshControls();
    });
  }
}

noNodule.addEventListener("change", () => {
  state.noNodule = noNodule.checked;
  if (state.noNodule) viewer.clearPolygon();
  refreshControls();
});

clearButton.addEventListener("click", () => viewer.clearPolygon());

viewer.onPolygonChange = () => {
  state.polygon = viewer.polygon;
  state.polygonClosed = viewer.polygonClosed;
  if (viewer.polygon.length > 0) {
    state.noNodule = false;
  }
  refreshControls();
};

window.addEventListener("keydown", (e) => {
  if (e.target instanceof HTMLInputElement) return;
  const digit = Number(e.key);
  if (Number.isInteger(digit) && digit >= 1 && digit <= 6) {
    if (assignDigit(state, digit)) refreshControls();
  } else if (e.key === "Enter" && !submitButton.disabled) {
    void submit();
  }
});

submitButton.addEventListener("click", () => void submit());
retryButton.addEventListener("click", () => void loadNext());

if (!token) {
  setStatus("no session token: open this page as /?token=<your token>", true);
  retryButton.hidden = true;
} else {
  void loadNext();
}

// score bound hints on the legend
for (const name of SCORE_ORDER) {
  const [lo, hi] = SCORE_BOUNDS[name];
  const label = document.querySelector(`label[data-score-label="${name}"]`);
  if (label) label.setAttribute("title", `${lo}..${hi}`);
}

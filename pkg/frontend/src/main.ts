import { ApiClient } from "./api.js";
import { renderGrid } from "./grid.js";
import { applyOverlay, removeOverlay } from "./overlay.js";
import {
  SessionState,
  canSubmit,
  currentValueName,
  initialState,
  selectManipulation,
  selectQueryImage,
  toggleOverlay,
  withResponse,
} from "./state.js";
import { ImageRecord, Schema } from "./types.js";

const DISPLAY_SIZE = 192;

class AppController {
  private api = new ApiClient("");
  private state: SessionState = initialState(10);
  private schema: Schema | null = null;
  private inflight: AbortController | null = null;
  private overlayEl: HTMLElement | null = null;

  private el<T extends HTMLElement>(id: string): T {
    const node = document.getElementById(id);
    if (!node) throw new Error(`missing #${id}`);
    return node as T;
  }

  async start(): Promise<void> {
    try {
      this.schema = await this.api.schema();
      const images = await this.api.queryImages();
      this.renderPicker(images);
      this.renderSelectors();
      this.el("retry-banner").hidden = true;
    } catch (err) {
      const banner = this.el("retry-banner");
      banner.hidden = false;
      banner.textContent = `service unreachable: ${err}. `;
      const retry = document.createElement("button");
      retry.textContent = "retry";
      retry.addEventListener("click", () => void this.start());
      banner.appendChild(retry);
    }
  }

  private renderPicker(images: ImageRecord[]): void {
    const picker = this.el("picker");
    picker.textContent = "";
    for (const rec of images) {
      const img = document.createElement("img");
      img.src = this.api.thumbnailUrl(rec.id);
      img.alt = rec.id;
      img.title = rec.id;
      img.addEventListener("click", () => this.pick(rec.id, rec.labels));
      picker.appendChild(img);
    }
  }

  private pick(id: string, labels: number[]): void {
    this.state = selectQueryImage(this.state, id, labels);
    this.clearOverlay();
    const q = this.el<HTMLImageElement>("query-image");
    q.src = this.api.thumbnailUrl(id);
    q.width = DISPLAY_SIZE;
    q.height = DISPLAY_SIZE;
    this.el("query-id").textContent = id;
    this.el("grid").textContent = "";
    this.renderSelectors();
  }

  private renderSelectors(): void {
    if (!this.schema) return;
    const host = this.el("selectors");
    host.textContent = "";
    for (const attr of this.schema.attributes) {
      const group = document.createElement("fieldset");
      const legend = document.createElement("legend");
      legend.textContent = attr.name;
      group.appendChild(legend);
      for (const value of attr.values) {
        const label = document.createElement("label");
        const radio = document.createElement("input");
        radio.type = "radio";
        radio.name = `attr-${attr.name}`;
        radio.value = value;
        const isCurrent = this.state.queryLabels !== null &&
          currentValueName(this.schema, this.state.queryLabels, attr.name) === value;
        radio.disabled = this.state.queryLabels === null || isCurrent;
        radio.checked = this.state.attribute === attr.name &&
          this.state.value === value;
        radio.addEventListener("change", () => {
          if (!this.schema) return;
          // picking in one attribute clears the radios of the others:
          // exactly one attribute is manipulated per query
          for (const other of this.schema.attributes) {
            if (other.name !== attr.name) {
              document.querySelectorAll<HTMLInputElement>(
                `input[name="attr-${other.name}"]`,
              ).forEach((n) => { n.checked = false; });
            }
          }
          this.state = selectManipulation(this.state, this.schema, attr.name, value);
          void this.submit();
        });
        label.appendChild(radio);
        label.append(` ${value}${isCurrent ? " (current)" : ""}`);
        group.appendChild(label);
      }
      const overlayBtn = document.createElement("button");
      overlayBtn.textContent = "AAM";
      overlayBtn.title = `toggle ${attr.name} activation overlay`;
      overlayBtn.disabled = this.state.queryId === null;
      overlayBtn.addEventListener("click", () => void this.toggleAam(attr.name));
      group.appendChild(overlayBtn);
      host.appendChild(group);
    }
  }

  private async submit(): Promise<void> {
    if (!canSubmit(this.state)) return;
    // a newer submission cancels the pending render
    this.inflight?.abort();
    const controller = new AbortController();
    this.inflight = controller;
    const errBox = this.el("query-error");
    errBox.textContent = "";
    try {
      const response = await this.api.runQuery(
        this.state.queryId!, this.state.attribute!, this.state.value!,
        this.state.k, controller.signal);
      if (controller.signal.aborted) return;
      this.state = withResponse(this.state, response);
      renderGrid(this.el("grid"), response, {
        thumbnailUrl: (id) => this.api.thumbnailUrl(id),
        onPick: (id, labels) => this.pick(id, labels),
      });
    } catch (err) {
      if (controller.signal.aborted) return;
      errBox.textContent = String(err);
    }
  }

  private async toggleAam(attribute: string): Promise<void> {
    const queryId = this.state.queryId;
    if (queryId === null) return;
    const wasOn = this.state.overlayAttribute === attribute;
    this.state = toggleOverlay(this.state, attribute);
    this.clearOverlay();
    if (wasOn) return;
    try {
      const box = await this.api.aamBox(queryId, attribute);
      this.overlayEl = applyOverlay(
        this.el("query-frame"),
        this.api.aamPngUrl(queryId, attribute),
        box.box, DISPLAY_SIZE, DISPLAY_SIZE);
    } catch (err) {
      this.state = toggleOverlay(this.state, attribute);  // roll back
      this.el("query-error").textContent = `overlay unavailable: ${err}`;
    }
  }

  private clearOverlay(): void {
    if (this.overlayEl) {
      removeOverlay(this.overlayEl);
      this.overlayEl = null;
    }
  }
}

new AppController().start();

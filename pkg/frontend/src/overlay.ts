import { BoxRecord } from "./types.js";

export interface OverlayRect {
  left: number;
  top: number;
  width: number;
  height: number;
}

/** Normalized box -> pixel rectangle at the displayed size. */
export function computeOverlayRect(
  box: BoxRecord["box"],
  displayWidth: number,
  displayHeight: number,
): OverlayRect {
  const left = box.x1 * displayWidth;
  const top = box.y1 * displayHeight;
  return {
    left,
    top,
    width: box.x2 * displayWidth - left,
    height: box.y2 * displayHeight - top,
  };
}

/** Alpha-blend the heatmap over the query image and draw the box. Returns
 * the overlay element so toggling off can remove exactly what was added. */
export function applyOverlay(
  host: HTMLElement,
  heatmapUrl: string,
  box: BoxRecord["box"],
  displayWidth: number,
  displayHeight: number,
): HTMLElement {
  const overlay = document.createElement("div");
  overlay.className = "aam-overlay";
  overlay.style.width = `${displayWidth}px`;
  overlay.style.height = `${displayHeight}px`;

  const heat = document.createElement("img");
  heat.src = heatmapUrl;
  heat.className = "aam-heat";
  heat.width = displayWidth;
  heat.height = displayHeight;
  overlay.appendChild(heat);

  const rect = computeOverlayRect(box, displayWidth, displayHeight);
  const frame = document.createElement("div");
  frame.className = "aam-box";
  frame.style.left = `${rect.left}px`;
  frame.style.top = `${rect.top}px`;
  frame.style.width = `${rect.width}px`;
  frame.style.height = `${rect.height}px`;
  overlay.appendChild(frame);

  host.appendChild(overlay);
  return overlay;
}

export function removeOverlay(overlay: HTMLElement): void {
  overlay.remove();
}

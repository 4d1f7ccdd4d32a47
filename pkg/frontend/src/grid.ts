import { QueryResponse } from "./types.js";

export interface GridCallbacks {
  thumbnailUrl: (id: string) => string;
  onPick?: (id: string, labels: number[]) => void;
}

/** Render the ranked results into `container`: one cell per result in
 * server order, hit results outlined via the `hit` class, distance shown
 * on hover (title attribute). Never reorders, filters, or truncates. */
export function renderGrid(
  container: HTMLElement,
  response: QueryResponse,
  callbacks: GridCallbacks,
): HTMLElement[] {
  container.textContent = "";
  const cells: HTMLElement[] = [];
  response.results.forEach((entry, rank) => {
    const cell = document.createElement("figure");
    cell.className = entry.hit ? "cell hit" : "cell";
    cell.dataset.id = entry.id;
    cell.dataset.rank = String(rank + 1);
    cell.title = `d2=${entry.distance.toFixed(6)}`;

    const img = document.createElement("img");
    img.src = callbacks.thumbnailUrl(entry.id);
    img.alt = entry.id;
    cell.appendChild(img);

    const caption = document.createElement("figcaption");
    caption.textContent = `#${rank + 1} ${entry.id}`;
    cell.appendChild(caption);

    if (callbacks.onPick) {
      cell.addEventListener("click", () => {
        callbacks.onPick!(entry.id, entry.labels);
      });
    }
    container.appendChild(cell);
    cells.push(cell);
  });
  return cells;
}

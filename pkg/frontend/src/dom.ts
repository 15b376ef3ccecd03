/** Thin DOM helpers; all content goes through textContent (no innerHTML). */

export function el(tag: string, className?: string, text?: string): HTMLElement {
  const node = document.createElement(tag);
  if (className) {
    node.className = className;
  }
  if (text !== undefined) {
    node.textContent = text;
  }
  return node;
}

export function clear(node: HTMLElement): void {
  while (node.firstChild) {
    node.removeChild(node.firstChild);
  }
}

export function table(headers: string[], rows: string[][], rowClasses?: (string | null)[]): HTMLElement {
  const tbl = el("table", "data-table");
  const head = el("tr");
  for (const h of headers) {
    head.appendChild(el("th", undefined, h));
  }
  tbl.appendChild(head);
  rows.forEach((cells, i) => {
    const tr = el("tr", rowClasses?.[i] ?? undefined);
    for (const cell of cells) {
      tr.appendChild(el("td", undefined, cell));
    }
    tbl.appendChild(tr);
  });
  return tbl;
}

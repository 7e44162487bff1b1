/**
 * Render a context string with one span wrapped in <mark>.
 *
 * The offsets come straight from the service response. They are used as
 * given: no searching for the answer text, no re-tokenizing. If the
 * service says [12, 16), characters 12..15 get highlighted even when the
 * same substring also appears elsewhere.
 */
export function renderHighlight(
  container: HTMLElement,
  context: string,
  charStart: number,
  charEnd: number,
): void {
  container.replaceChildren();

  const start = Math.max(0, Math.min(charStart, context.length));
  const end = Math.max(start, Math.min(charEnd, context.length));

  const before = context.slice(0, start);
  const inside = context.slice(start, end);
  const after = context.slice(end);

  if (before !== "") {
    container.appendChild(document.createTextNode(before));
  }
  const mark = document.createElement("mark");
  mark.className = "answer-span";
  mark.textContent = inside;
  container.appendChild(mark);
  if (after !== "") {
    container.appendChild(document.createTextNode(after));
  }
}

/**
 * At most one relight request is "current" per mixer. Every dispatch bumps a
 * ticket; when a response lands we apply it only if its ticket is still the
 * latest. A slow early response can therefore never clobber the frames of a
 * later edit, no matter how the network reorders completions.
 */
export class LatestWins<T> {
  private ticket = 0;

  /** Drop any response from requests started before now. */
  invalidate(): void {
    this.ticket++;
  }

  get inFlight(): boolean {
    return this.pendingCount > 0;
  }

  private pendingCount = 0;

  async dispatch(work: Promise<T>, apply: (value: T) => void, reject?: (err: unknown) => void): Promise<void> {
    const mine = ++this.ticket;
    this.pendingCount++;
    try {
      const value = await work;
      if (mine === this.ticket) apply(value);
    } catch (err) {
      if (mine === this.ticket && reject) reject(err);
    } finally {
      this.pendingCount--;
    }
  }
}

/** Trailing-edge debounce; used to keep slider drags off the network. */
export function debounce<A extends unknown[]>(fn: (...args: A) => void, waitMs = 200): (...args: A) => void {
  let timer: ReturnType<typeof setTimeout> | null = null;
  return (...args: A) => {
    if (timer) clearTimeout(timer);
    timer = setTimeout(() => {
      timer = null;
      fn(...args);
    }, waitMs);
  };
}

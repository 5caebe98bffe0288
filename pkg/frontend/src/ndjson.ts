/** Incremental parser for line-delimited JSON streams. */

export class NdjsonParser {
  private buffer = "";

  /** Feed a chunk; returns the records completed by it. */
  push(chunk: string): unknown[] {
    this.buffer += chunk;
    const out: unknown[] = [];
    let nl: number;
    while ((nl = this.buffer.indexOf("\n")) >= 0) {
      const line = this.buffer.slice(0, nl).trim();
      this.buffer = this.buffer.slice(nl + 1);
      if (line.length > 0) out.push(JSON.parse(line));
    }
    return out;
  }

  /** Parse whatever remains (stream ended without a trailing newline). */
  flush(): unknown[] {
    const line = this.buffer.trim();
    this.buffer = "";
    return line.length > 0 ? [JSON.parse(line)] : [];
  }
}

export async function* readNdjson(
  stream: ReadableStream<Uint8Array>,
): AsyncGenerator<unknown> {
  const parser = new NdjsonParser();
  const decoder = new TextDecoder();
  const reader = stream.getReader();
  try {
    for (;;) {
      const { done, value } = await reader.read();
      if (done) break;
      for (const rec of parser.push(decoder.decode(value, { stream: true }))) {
        yield rec;
      }
    }
    for (const rec of parser.flush()) yield rec;
  } finally {
    reader.releaseLock();
  }
}

// Base64 P5 graymap decoding for canvas rendering.

export interface GrayImage {
  width: number;
  height: number;
  /** row-major luminance bytes */
  pixels: Uint8Array;
}

export function decodeBase64Pgm(b64: string): GrayImage {
  const raw = typeof atob === "function"
    ? Uint8Array.from(atob(b64), (c) => c.charCodeAt(0))
    : new Uint8Array(Buffer.from(b64, "base64"));
  // header: "P5\n<w> <h>\n<max>\n" then binary payload
  let pos = 0;
  const fields: string[] = [];
  while (fields.length < 4 && pos < raw.length) {
    while (pos < raw.length && isSpace(raw[pos])) pos++;
    if (raw[pos] === 0x23) { // '#' comment
      while (pos < raw.length && raw[pos] !== 0x0a) pos++;
      continue;
    }
    let start = pos;
    while (pos < raw.length && !isSpace(raw[pos])) pos++;
    fields.push(String.fromCharCode(...raw.slice(start, pos)));
  }
  pos++; // single whitespace after maxval
  if (fields[0] !== "P5") throw new Error(`not a binary graymap: ${fields[0]}`);
  const width = parseInt(fields[1], 10);
  const height = parseInt(fields[2], 10);
  const pixels = raw.slice(pos, pos + width * height);
  if (pixels.length !== width * height) {
    throw new Error(`graymap payload truncated: ${pixels.length} of ${width * height}`);
  }
  return { width, height, pixels };
}

function isSpace(byte: number): boolean {
  return byte === 0x20 || byte === 0x0a || byte === 0x0d || byte === 0x09;
}

/** Expand to RGBA for putImageData, scaled by an integer zoom factor. */
export function toRgba(img: GrayImage, zoom: number): Uint8ClampedArray {
  const w = img.width * zoom;
  const h = img.height * zoom;
  const out = new Uint8ClampedArray(w * h * 4);
  for (let y = 0; y < h; y++) {
    for (let x = 0; x < w; x++) {
      const v = img.pixels[Math.floor(y / zoom) * img.width + Math.floor(x / zoom)];
      const o = (y * w + x) * 4;
      out[o] = out[o + 1] = out[o + 2] = v;
      out[o + 3] = 255;
    }
  }
  return out;
}

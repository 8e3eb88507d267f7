import { RleMask } from "./types.js";

/** Decode a row-major RLE mask (counts start with the zero run). */
export function rleDecode(rle: RleMask): Uint8Array {
    const out = new Uint8Array(rle.w * rle.h);
    let pos = 0;
    let value = 0;
    for (const count of rle.counts) {
        if (count < 0) throw new Error("negative RLE count");
        if (value) out.fill(1, pos, pos + count);
        pos += count;
        value = 1 - value;
    }
    if (pos !== rle.w * rle.h) {
        throw new Error(`RLE counts sum ${pos}, expected ${rle.w * rle.h}`);
    }
    return out;
}

export function maskArea(mask: Uint8Array): number {
    let n = 0;
    for (let i = 0; i < mask.length; i++) n += mask[i];
    return n;
}

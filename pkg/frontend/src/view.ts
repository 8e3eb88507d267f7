import { rleDecode } from "./rle.js";
import { ClickPayload, TaskLease } from "./types.js";

const MASK_TINT: [number, number, number, number] = [255, 0, 200, 90]; // magenta
const BOX_COLOR = "#f4c20d"; // yellow outline
const POSITIVE = "#2ecc40";
const NEGATIVE = "#ff4136";

/** Renders the layered task view: crop, box outline, mask tint, markers. */
export class TaskView {
    private ctx: CanvasRenderingContext2D;
    private cropImage: HTMLImageElement | null = null;
    private maskCanvas: HTMLCanvasElement;

    constructor(private canvas: HTMLCanvasElement) {
        const ctx = canvas.getContext("2d");
        if (!ctx) throw new Error("2d canvas unavailable");
        this.ctx = ctx;
        this.maskCanvas = document.createElement("canvas");
    }

    async showTask(lease: TaskLease, cropUrl: string): Promise<void> {
        this.canvas.width = lease.outer;
        this.canvas.height = lease.outer;
        this.cropImage = await loadImage(cropUrl);
        this.setMask(lease);
        this.draw(lease, []);
    }

    /** Pre-render the RLE mask into an offscreen tinted layer. */
    setMask(lease: TaskLease, rle = lease.mask): void {
        const bits = rleDecode(rle);
        this.maskCanvas.width = rle.w;
        this.maskCanvas.height = rle.h;
        const ctx = this.maskCanvas.getContext("2d")!;
        const img = ctx.createImageData(rle.w, rle.h);
        const [r, g, b, a] = MASK_TINT;
        for (let i = 0, j = 0; i < bits.length; i++, j += 4) {
            if (bits[i]) {
                img.data[j] = r;
                img.data[j + 1] = g;
                img.data[j + 2] = b;
                img.data[j + 3] = a;
            }
        }
        ctx.putImageData(img, 0, 0);
    }

    draw(lease: TaskLease, clicks: ClickPayload[]): void {
        const ctx = this.ctx;
        ctx.clearRect(0, 0, this.canvas.width, this.canvas.height);
        if (this.cropImage) ctx.drawImage(this.cropImage, 0, 0);
        ctx.imageSmoothingEnabled = false;
        ctx.drawImage(this.maskCanvas, 0, 0);
        const [bx, by, bw, bh] = lease.box_canvas;
        ctx.strokeStyle = BOX_COLOR;
        ctx.lineWidth = 2;
        ctx.strokeRect(bx, by, bw, bh);
        for (const click of clicks) {
            ctx.beginPath();
            ctx.arc(click.x, click.y, 4, 0, Math.PI * 2);
            ctx.fillStyle = click.polarity === "positive" ? POSITIVE : NEGATIVE;
            ctx.fill();
            ctx.strokeStyle = "#ffffff";
            ctx.lineWidth = 1.5;
            ctx.stroke();
        }
    }
}

function loadImage(url: string): Promise<HTMLImageElement> {
    return new Promise((resolve, reject) => {
        const img = new Image();
        img.onload = () => resolve(img);
        img.onerror = () => reject(new Error(`failed to load ${url}`));
        img.src = url;
    });
}

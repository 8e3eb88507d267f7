import { CampaignApi } from "./api.js";
import { clientToCanvas } from "./geometry.js";
import { Session } from "./session.js";
import { Polarity } from "./types.js";
import { TaskView } from "./view.js";

// Primary pointer button adds foreground, secondary removes; the on-screen
// toggle covers devices without a secondary button.

function el<T extends HTMLElement>(id: string): T {
    const node = document.getElementById(id);
    if (!node) throw new Error(`missing #${id}`);
    return node as T;
}

async function start() {
    const params = new URLSearchParams(window.location.search);
    const annotator = params.get("annotator") ?? `anon-${Math.floor(Math.random() * 1e6)}`;
    const api = new CampaignApi("");
    const session = new Session(api, annotator);

    const canvas = el<HTMLCanvasElement>("task-canvas");
    const view = new TaskView(canvas);
    const status = el<HTMLDivElement>("status");
    const policy = el<HTMLDivElement>("policy");
    const meta = el<HTMLDivElement>("meta");
    const toggle = el<HTMLButtonElement>("polarity-toggle");
    const undoBtn = el<HTMLButtonElement>("undo");
    const submitBtn = el<HTMLButtonElement>("submit");
    const acceptBtn = el<HTMLButtonElement>("accept");
    const skipBtn = el<HTMLButtonElement>("skip");

    let togglePolarity: Polarity = "positive";

    function refreshControls() {
        const n = session.buffer.length;
        const max = session.lease?.max_clicks ?? 0;
        submitBtn.disabled = n === 0 || session.phase !== "annotating";
        acceptBtn.disabled = n > 0 || session.phase !== "annotating";
        skipBtn.disabled = session.phase !== "annotating";
        undoBtn.disabled = n === 0;
        status.textContent =
            session.phase === "done"
                ? "no more tasks, thank you"
                : `${n}/${max} clicks in this round`;
        if (session.lease) view.draw(session.lease, session.buffer);
    }

    async function nextTask() {
        const lease = await session.loadNext();
        if (lease === null) {
            refreshControls();
            return;
        }
        await view.showTask(lease, api.cropUrl(lease));
        policy.textContent = lease.policy || "(no class policy provided)";
        meta.textContent = `${lease.class} · ${lease.instance_id} · round ${lease.round}`;
        refreshControls();
    }

    canvas.addEventListener("contextmenu", (e) => e.preventDefault());
    canvas.addEventListener("pointerdown", (e) => {
        if (!session.canPlace || session.lease === null) return;
        const rect = canvas.getBoundingClientRect();
        const { x, y } = clientToCanvas(e.clientX, e.clientY, rect, session.lease.outer);
        const polarity: Polarity =
            e.button === 2 ? "negative" : e.button === 0 ? togglePolarity : togglePolarity;
        session.place(x, y, polarity);
        refreshControls();
    });

    toggle.addEventListener("click", () => {
        togglePolarity = togglePolarity === "positive" ? "negative" : "positive";
        toggle.textContent = `click adds: ${togglePolarity === "positive" ? "foreground" : "background"}`;
    });
    undoBtn.addEventListener("click", () => {
        session.undoLast();
        refreshControls();
    });

    async function submit(kind: "clicks" | "zero_clicks" | "skip") {
        if (kind === "skip" && !window.confirm("Skip this instance? No mask will be created.")) {
            return;
        }
        try {
            const outcome = await session.submit(kind);
            if (outcome.leaseExpired) {
                status.textContent = "lease expired; re-leasing (your clicks are kept)";
                await nextTask();
                return;
            }
            if (outcome.result?.mask && session.lease === null) {
                status.textContent = `refined mask received (round ${outcome.result.round})`;
            }
            await nextTask();
        } catch (err) {
            status.textContent = `submit failed: ${err}`;
            refreshControls();
        }
    }

    submitBtn.addEventListener("click", () => submit("clicks"));
    acceptBtn.addEventListener("click", () => submit("zero_clicks"));
    skipBtn.addEventListener("click", () => submit("skip"));

    await nextTask();
}

start().catch((err) => {
    const status = document.getElementById("status");
    if (status) status.textContent = `failed to start: ${err}`;
});

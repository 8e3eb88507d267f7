// In-process double of the campaign API for client tests. Mirrors the
// server's lease / answer semantics: one unexpired lease per instance,
// round-scoped answers, terminal statuses, idempotent duplicate posts.

import { AnswerBody, RleMask, TaskLease } from "./types.js";

interface MockInstance {
    id: string;
    round: number;
    status: "active" | "accepted" | "skipped" | "exhausted";
    answers: AnswerBody[];
    pending: boolean; // answered with clicks, waiting for between-round refine
}

export class MockCampaign {
    instances: MockInstance[];
    leases = new Map<string, { instance: MockInstance; round: number; body?: string; result?: unknown }>();
    maxClicks = 4;
    rounds = 3;
    outer = 128;
    private counter = 0;

    constructor(ids: string[]) {
        this.instances = ids.map((id) => ({
            id, round: 1, status: "active", answers: [], pending: false,
        }));
    }

    /** The between-rounds refinement step: pending instances become leasable. */
    advanceRound(): void {
        for (const inst of this.instances) inst.pending = false;
    }

    private mask(): RleMask {
        return { w: this.outer, h: this.outer, counts: [0, this.outer * this.outer] };
    }

    fetch = async (input: string, init?: RequestInit): Promise<Response> => {
        const url = new URL(input, "http://mock");
        if (url.pathname === "/api/v1/tasks/next") {
            const inst = this.instances.find(
                (i) =>
                    i.status === "active" &&
                    !i.pending &&
                    ![...this.leases.values()].some(
                        (l) => l.instance === i && l.result === undefined,
                    ),
            );
            if (!inst) return new Response(null, { status: 204 });
            const taskId = `t${this.counter++}`;
            this.leases.set(taskId, { instance: inst, round: inst.round });
            const lease: TaskLease = {
                task_id: taskId,
                instance_id: inst.id,
                round: inst.round,
                annotator: url.searchParams.get("annotator") ?? "",
                expires: Date.now() / 1000 + 120,
                max_clicks: this.maxClicks,
                outer: this.outer,
                crop_url: `/api/v1/crops/${inst.id}.png`,
                box_canvas: [16, 16, 96, 96],
                mask: this.mask(),
                policy: "mock policy",
                class: "mock",
            };
            return Response.json(lease);
        }
        const answer = url.pathname.match(/^\/api\/v1\/tasks\/(.+)\/answer$/);
        if (answer && init?.method === "POST") {
            const lease = this.leases.get(answer[1]);
            if (!lease) return Response.json({ error: "unknown task" }, { status: 404 });
            const raw = String(init.body);
            if (lease.result !== undefined) {
                if (lease.body === raw) return Response.json(lease.result);
                return Response.json({ error: "answered" }, { status: 409 });
            }
            const body = JSON.parse(raw) as AnswerBody;
            if (body.type === "clicks" && (body.clicks.length === 0 || body.clicks.length > this.maxClicks)) {
                return Response.json({ error: "bad click count" }, { status: 400 });
            }
            const inst = lease.instance;
            inst.answers.push(body);
            if (body.type === "zero_clicks") inst.status = "accepted";
            else if (body.type === "skip") inst.status = "skipped";
            else if (inst.round >= this.rounds) inst.status = "exhausted";
            else {
                inst.round += 1;
                inst.pending = true;
            }
            this.leases.delete(answer[1]);
            const result = { status: inst.status, instance_id: inst.id, round: lease.round };
            lease.result = result;
            lease.body = raw;
            this.leases.set(answer[1], lease);
            return Response.json(result);
        }
        return Response.json({ error: "not found" }, { status: 404 });
    };
}

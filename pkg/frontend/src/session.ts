import { CampaignApi, LeaseExpiredError } from "./api.js";
import { AnswerBody, AnswerResult, ClickPayload, Polarity, TaskLease } from "./types.js";

export type SessionPhase = "idle" | "annotating" | "submitting" | "done";

export interface SubmitOutcome {
    result: AnswerResult | null;
    leaseExpired: boolean;
}

/**
 * One annotator's task loop: holds the active lease, the pending click
 * buffer and the task timer. Click timestamps are milliseconds since the
 * task was shown and strictly increase within a task. On a lease conflict
 * the buffer is preserved so it can be replayed onto a fresh lease.
 */
export class Session {
    lease: TaskLease | null = null;
    buffer: ClickPayload[] = [];
    phase: SessionPhase = "idle";
    lastResult: AnswerResult | null = null;
    private shownAt = 0;
    private lastTms = 0;

    constructor(
        private api: CampaignApi,
        private annotator: string,
        private now: () => number = () => performance.now(),
    ) {}

    async loadNext(): Promise<TaskLease | null> {
        const keepBuffer = this.phase === "annotating" && this.buffer.length > 0;
        this.lease = await this.api.nextTask(this.annotator);
        if (this.lease === null) {
            this.phase = "done";
            this.buffer = [];
            return null;
        }
        this.phase = "annotating";
        this.shownAt = this.now();
        this.lastTms = 0;
        if (!keepBuffer) this.buffer = [];
        return this.lease;
    }

    get canPlace(): boolean {
        return (
            this.phase === "annotating" &&
            this.lease !== null &&
            this.buffer.length < this.lease.max_clicks
        );
    }

    get elapsedMs(): number {
        return this.lease === null ? 0 : Math.round(this.now() - this.shownAt);
    }

    place(x: number, y: number, polarity: Polarity): ClickPayload {
        if (!this.canPlace || this.lease === null) {
            throw new Error("click buffer is full or no task is active");
        }
        const t = Math.max(this.elapsedMs, this.lastTms + 1);
        this.lastTms = t;
        const click: ClickPayload = { x, y, polarity, t_ms: t };
        this.buffer.push(click);
        return click;
    }

    undoLast(): ClickPayload | null {
        return this.buffer.pop() ?? null;
    }

    answerBody(type: "clicks" | "zero_clicks" | "skip"): AnswerBody {
        if (type === "clicks" && this.buffer.length === 0) {
            throw new Error("no clicks to submit");
        }
        return {
            type,
            clicks: type === "clicks" ? [...this.buffer] : [],
            duration_ms: this.elapsedMs,
        };
    }

    /**
     * Post the answer. On success the buffer clears and the session is ready
     * for the next task; on an expired lease the buffer stays for re-lease.
     */
    async submit(type: "clicks" | "zero_clicks" | "skip"): Promise<SubmitOutcome> {
        if (this.phase !== "annotating" || this.lease === null) {
            throw new Error("nothing to submit");
        }
        const body = this.answerBody(type);
        this.phase = "submitting";
        try {
            const result = await this.api.submitAnswer(this.lease.task_id, body);
            this.lastResult = result;
            this.buffer = [];
            this.phase = "idle";
            this.lease = null;
            return { result, leaseExpired: false };
        } catch (err) {
            if (err instanceof LeaseExpiredError) {
                this.phase = "annotating"; // keep the buffer for the re-lease
                this.lease = null;
                return { result: null, leaseExpired: true };
            }
            this.phase = "annotating";
            throw err;
        }
    }
}

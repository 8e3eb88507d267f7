import { AnswerBody, AnswerResult, TaskLease } from "./types.js";

export class LeaseExpiredError extends Error {}
export class ApiError extends Error {
    constructor(public status: number, message: string) {
        super(message);
    }
}

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

/** Thin typed client for the campaign endpoints. */
export class CampaignApi {
    constructor(
        private base: string = "",
        private fetchImpl: FetchLike = (input, init) => fetch(input, init),
    ) {}

    async nextTask(annotator: string): Promise<TaskLease | null> {
        const resp = await this.fetchImpl(
            `${this.base}/api/v1/tasks/next?annotator=${encodeURIComponent(annotator)}`,
        );
        if (resp.status === 204) return null;
        if (!resp.ok) throw new ApiError(resp.status, await resp.text());
        return (await resp.json()) as TaskLease;
    }

    async submitAnswer(taskId: string, body: AnswerBody): Promise<AnswerResult> {
        const resp = await this.fetchImpl(`${this.base}/api/v1/tasks/${taskId}/answer`, {
            method: "POST",
            headers: { "content-type": "application/json" },
            body: JSON.stringify(body),
        });
        if (resp.status === 409) throw new LeaseExpiredError(await resp.text());
        if (!resp.ok) throw new ApiError(resp.status, await resp.text());
        return (await resp.json()) as AnswerResult;
    }

    cropUrl(lease: TaskLease): string {
        return `${this.base}${lease.crop_url}`;
    }
}

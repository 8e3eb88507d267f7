// Wire types for the /api/v1 campaign endpoints.

export type Polarity = "positive" | "negative";

export interface RleMask {
    w: number;
    h: number;
    counts: number[];
}

export interface TaskLease {
    task_id: string;
    instance_id: string;
    round: number;
    annotator: string;
    expires: number;
    max_clicks: number;
    outer: number;
    crop_url: string;
    box_canvas: [number, number, number, number];
    mask: RleMask;
    policy: string;
    class: string;
}

export interface ClickPayload {
    x: number;
    y: number;
    polarity: Polarity;
    t_ms: number;
}

export type AnswerType = "clicks" | "zero_clicks" | "skip";

export interface AnswerBody {
    type: AnswerType;
    clicks: ClickPayload[];
    duration_ms: number;
}

export interface AnswerResult {
    status: string;
    instance_id: string;
    round: number;
    mask?: RleMask;
}

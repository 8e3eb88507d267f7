// End-to-end loop against a real campaign server. Start one first, e.g.
//   maskloop serve --campaign camp/ --port 8008
// then: MASKLOOP_SERVER_URL=http://127.0.0.1:8008 npm test

import { describe, expect, it } from "vitest";

import { CampaignApi } from "./api.js";
import { Session } from "./session.js";

const base = process.env.MASKLOOP_SERVER_URL;

describe.skipIf(!base)("live server loop", () => {
    it("places 4 clicks, submits, and receives the next task", async () => {
        const api = new CampaignApi(base!);
        const session = new Session(api, "live-test", () => Date.now());
        const lease = await session.loadNext();
        expect(lease).not.toBeNull();
        for (let i = 0; i < Math.min(4, lease!.max_clicks); i++) {
            session.place(8 + 11 * i, 9 + 7 * i, i % 2 ? "negative" : "positive");
        }
        const outcome = await session.submit("clicks");
        expect(outcome.leaseExpired).toBe(false);
        expect(outcome.result?.instance_id).toBe(lease!.instance_id);
        await session.loadNext();
    });

    it("accept and skip end their instances", async () => {
        const api = new CampaignApi(base!);
        const session = new Session(api, "live-test-2", () => Date.now());
        const first = await session.loadNext();
        if (first === null) return; // campaign drained by earlier runs
        const accepted = await session.submit("zero_clicks");
        expect(accepted.result?.status).toBe("accepted");
        const second = await session.loadNext();
        if (second === null) return;
        const skipped = await session.submit("skip");
        expect(skipped.result?.status).toBe("skipped");
        const gone = await fetch(`${base}/api/v1/masks/${second.instance_id}`);
        expect(gone.status).toBe(404);
    });
});

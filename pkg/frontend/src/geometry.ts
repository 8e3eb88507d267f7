// Pointer-event to canvas-pixel coordinate mapping.
//
// The canvas element renders `outer` x `outer` canvas pixels but is laid out
// at an arbitrary CSS size; clicks convert through the bounding rect. The
// server expects continuous canvas coordinates in [0, outer).

export interface DisplayRect {
    left: number;
    top: number;
    width: number;
    height: number;
}

export function clientToCanvas(
    clientX: number,
    clientY: number,
    rect: DisplayRect,
    outer: number,
): { x: number; y: number } {
    const x = ((clientX - rect.left) / rect.width) * outer;
    const y = ((clientY - rect.top) / rect.height) * outer;
    return {
        x: Math.min(Math.max(x, 0), outer - 1e-3),
        y: Math.min(Math.max(y, 0), outer - 1e-3),
    };
}

export function canvasToClient(
    x: number,
    y: number,
    rect: DisplayRect,
    outer: number,
): { clientX: number; clientY: number } {
    return {
        clientX: rect.left + (x / outer) * rect.width,
        clientY: rect.top + (y / outer) * rect.height,
    };
}

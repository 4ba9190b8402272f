export * from "./types.js";
export * from "./boxes.js";
export * from "./state.js";
export * from "./theme.js";
export * from "./render.js";
export * from "./client.js";
export * from "./protocol.js";

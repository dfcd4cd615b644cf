/* Minimal C consumer of the sober FFI.
 *
 * Build (from the workspace root, after `cargo build -p sober-ffi`):
 *   cc -I crates/ffi/include examples/run_branin.c \
 *      -L target/debug -lsober_ffi -lm -o run_branin
 *   LD_LIBRARY_PATH=target/debug ./run_branin
 */
#include <stdio.h>
#include "sober.h"

int main(void) {
    const char *config =
        "{\"candidates\": 1000, \"nystrom_samples\": 128,"
        " \"batch_size\": 16, \"max_iterations\": 4, \"mle_restarts\": 2}";
    SoberRunResult *result = NULL;
    SoberStatus status =
        sober_run_function("branin", "sober-lfi", config, 7, &result);
    if (status != SOBER_STATUS_OK) {
        fprintf(stderr, "run failed: %s\n", sober_last_error_message());
        return 1;
    }
    printf("iterations: %zu\n", sober_result_iterations(result));
    printf("best value: %.6f\n", sober_result_incumbent_value(result));

    char *csv = NULL;
    if (sober_result_history_csv(result, &csv) == SOBER_STATUS_OK) {
        printf("%s", csv);
        sober_string_free(csv);
    }
    sober_result_free(result);
    return 0;
}

// Command-line front end. Verbs are wired up as the pipeline stages land.
#include <cstdio>

int main(int argc, char** argv) {
    (void)argc;
    (void)argv;
    std::fprintf(stderr, "recon: pipeline verbs not wired yet\n");
    return 2;
}
